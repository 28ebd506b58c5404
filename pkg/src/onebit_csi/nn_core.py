"""Single-hidden-layer dense subnets with input batch normalization.

Every trainable piece of the receiver has the same topology::

    Y = act_out( LReLU( BN(X) @ W1 + b1 ) @ W2 + b2 )

with ``act_out`` either ``tanh`` or the identity.  Batches are rows.  All
math runs in float64 so that gradients can be checked against finite
differences to ~1e-7.
"""
from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LRELU_SLOPE = 0.01

ACTIVATIONS = ("linear", "tanh")
TRAINABLE = ("W1", "b1", "W2", "b2", "bn_gamma", "bn_beta")
PENALIZED = ("W1", "b1", "W2", "b2")


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from before a parameter update."""


@dataclass
class SubnetParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    out_activation: str = "tanh"
    slope: float = LRELU_SLOPE
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.out_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.out_activation!r}")
        n_in, n_hidden, n_out = self.dims
        expected = {
            "W1": (n_in, n_hidden), "b1": (n_hidden,), "W2": (n_hidden, n_out),
            "b2": (n_out,), "bn_gamma": (n_in,), "bn_beta": (n_in,),
            "bn_mean": (n_in,), "bn_var": (n_in,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, "
                                 f"expected {shape}")
        if np.any(self.bn_var <= 0):
            raise ValueError("running variance must be positive")

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int,
             rng: np.random.Generator, out_activation: str = "tanh",
             slope: float = LRELU_SLOPE) -> "SubnetParams":
        """Glorot-uniform weights, zero biases, identity batch norm."""
        def glorot(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        return cls(
            W1=glorot(n_in, n_hidden), b1=np.zeros(n_hidden),
            W2=glorot(n_hidden, n_out), b2=np.zeros(n_out),
            bn_gamma=np.ones(n_in), bn_beta=np.zeros(n_in),
            bn_mean=np.zeros(n_in), bn_var=np.ones(n_in),
            out_activation=out_activation, slope=slope,
        )

    @classmethod
    def zeros(cls, n_in, n_hidden, n_out, out_activation="tanh",
              slope=LRELU_SLOPE) -> "SubnetParams":
        return cls(
            W1=np.zeros((n_in, n_hidden)), b1=np.zeros(n_hidden),
            W2=np.zeros((n_hidden, n_out)), b2=np.zeros(n_out),
            bn_gamma=np.ones(n_in), bn_beta=np.zeros(n_in),
            bn_mean=np.zeros(n_in), bn_var=np.ones(n_in),
            out_activation=out_activation, slope=slope,
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TRAINABLE}

    def copy(self) -> "SubnetParams":
        return copy.deepcopy(self)


@dataclass
class ForwardCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    y: np.ndarray
    version: int


def leaky_relu(x, slope=LRELU_SLOPE):
    return np.where(x > 0, x, slope * x)


def subnet_forward(params: SubnetParams, X: np.ndarray, train: bool = False):
    """Forward pass.

    In training mode batch statistics normalize the input and a
    :class:`ForwardCache` is returned for :func:`subnet_backward`; running
    statistics are left untouched (see :func:`update_running_stats`).  In
    inference mode the running statistics are used and the cache is ``None``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.dims[0]:
        raise ValueError(f"expected (batch, {params.dims[0]}) input, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite subnet input")

    if train:
        mean = X.mean(axis=0)
        var = X.var(axis=0)
    else:
        mean, var = params.bn_mean, params.bn_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (X - mean) * inv_std
    h_pre = (params.bn_gamma * x_hat + params.bn_beta) @ params.W1 + params.b1
    h = leaky_relu(h_pre, params.slope)
    y = h @ params.W2 + params.b2
    if params.out_activation == "tanh":
        y = np.tanh(y)
    if not train:
        return y, None
    return y, ForwardCache(x_hat, inv_std, mean, var, h_pre, h, y, params.version)


def subnet_backward(params: SubnetParams, cache: ForwardCache, dY: np.ndarray):
    """Gradients of a training-mode forward pass.

    Returns ``(grads, dX)`` where ``grads`` maps the names in
    :data:`TRAINABLE` to arrays.  The batch-statistics path of batch norm is
    differentiated exactly.  The LReLU derivative at 0 is the negative slope.
    """
    if cache is None or cache.version != params.version:
        raise StaleCacheError("cache does not belong to the current parameters")
    dY = np.asarray(dY, dtype=float)
    if params.out_activation == "tanh":
        dz = dY * (1.0 - cache.y ** 2)
    else:
        dz = dY
    grads = {"W2": cache.h.T @ dz, "b2": dz.sum(axis=0)}
    dh = dz @ params.W2.T
    dh_pre = np.where(cache.h_pre > 0, dh, params.slope * dh)
    bn_out = params.bn_gamma * cache.x_hat + params.bn_beta
    grads["W1"] = bn_out.T @ dh_pre
    grads["b1"] = dh_pre.sum(axis=0)
    dbn = dh_pre @ params.W1.T
    grads["bn_gamma"] = (dbn * cache.x_hat).sum(axis=0)
    grads["bn_beta"] = dbn.sum(axis=0)

    dx_hat = dbn * params.bn_gamma
    B = dx_hat.shape[0]
    dX = (cache.inv_std / B) * (
        B * dx_hat - dx_hat.sum(axis=0)
        - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=0))
    return grads, dX


def update_running_stats(params: SubnetParams, cache: ForwardCache,
                         momentum: float = BN_MOMENTUM) -> None:
    params.bn_mean = momentum * params.bn_mean + (1 - momentum) * cache.batch_mean
    params.bn_var = momentum * params.bn_var + (1 - momentum) * cache.batch_var


def named_tensors(nets: Mapping[str, SubnetParams],
                  names: Iterable[str] = TRAINABLE) -> dict[str, np.ndarray]:
    names = tuple(names)
    return {f"{key}.{name}": getattr(net, name)
            for key, net in nets.items() for name in names}


def l2_penalty(nets: Mapping[str, SubnetParams], alpha: float):
    """``alpha * sum ||theta||^2`` over weights and biases (not batch norm).

    Returns ``(value, grads)`` with ``grads`` keyed like :func:`named_tensors`.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    tensors = named_tensors(nets, PENALIZED)
    value = alpha * sum(float(np.sum(t * t)) for t in tensors.values())
    return value, {k: 2.0 * alpha * t for k, t in tensors.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key in sorted(params):
        p = params[key]
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, "
                             f"parameter has {p.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --- checkpoints ----------------------------------------------------------

MAGIC = b"OBCS"
FORMAT_VERSION = 1
_TENSOR_ORDER = ("W1", "b1", "W2", "b2", "bn_gamma", "bn_beta", "bn_mean", "bn_var")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16"), 2: np.dtype("<i8")}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path, nets: Mapping[str, SubnetParams],
                    arrays: Mapping[str, np.ndarray] | None = None) -> None:
    """Write networks (and auxiliary arrays such as the measurement matrix).

    Layout, all little-endian: magic ``OBCS``, u16 version, u16 network
    count, u16 array count; per network its name, u32 dims, u8 output
    activation, f64 LReLU slope and the eight float64 tensors row-major;
    per array its name, u8 ndim, u32 shape, u8 dtype code and raw data;
    finally a u32 CRC-32 of everything before it.
    """
    arrays = dict(arrays or {})
    out = [MAGIC, struct.pack("<HHH", FORMAT_VERSION, len(nets), len(arrays))]
    for name, net in nets.items():
        out.append(_pack_name(name))
        out.append(struct.pack("<IIIBd", *net.dims,
                               ACTIVATIONS.index(net.out_activation), net.slope))
        for t in _TENSOR_ORDER:
            out.append(np.ascontiguousarray(getattr(net, t), dtype="<f8").tobytes())
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            code = 0
        elif arr.dtype.kind == "c":
            code = 1
        elif arr.dtype.kind in "iub":
            code = 2
        else:
            raise TypeError(f"cannot store array {name!r} of dtype {arr.dtype}")
        out.append(_pack_name(name))
        out.append(struct.pack(f"<B{arr.ndim}IB", arr.ndim, *arr.shape, code))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(out)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumError("checkpoint body ends early")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self, shape, dtype) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(
            dtype.newbyteorder("="))


def load_checkpoint(path, expected_dims: Mapping[str, tuple] | None = None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(nets, arrays)``.  Raises :class:`BadMagicError`,
    :class:`UnsupportedVersionError`, :class:`ChecksumError` or, when
    ``expected_dims`` is given and disagrees, :class:`ConfigMismatchError`.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(buf) < 10:
        raise ChecksumError(f"{path}: truncated header")
    (version,) = struct.unpack("<H", buf[4:6])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, "
                                      f"expected {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")

    r = _Reader(body)
    r.take(6)
    n_nets, n_arrays = r.unpack("<HH")
    nets = {}
    for _ in range(n_nets):
        name = r.name()
        n_in, n_hidden, n_out, act, slope = r.unpack("<IIIBd")
        shapes = {"W1": (n_in, n_hidden), "b1": (n_hidden,),
                  "W2": (n_hidden, n_out), "b2": (n_out,)}
        tensors = {t: r.array(shapes.get(t, (n_in,)), _DTYPES[0])
                   for t in _TENSOR_ORDER}
        nets[name] = SubnetParams(**tensors, out_activation=ACTIVATIONS[act],
                                  slope=slope)
    arrays = {}
    for _ in range(n_arrays):
        name = r.name()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (code,) = r.unpack("<B")
        arrays[name] = r.array(shape, _DTYPES[code])

    if expected_dims is not None:
        for name, dims in expected_dims.items():
            if name not in nets:
                raise ConfigMismatchError(f"{path}: missing network {name!r}")
            if tuple(nets[name].dims) != tuple(dims):
                raise ConfigMismatchError(
                    f"{path}: network {name!r} has dims {nets[name].dims}, "
                    f"configuration expects {tuple(dims)}")
    return nets, arrays
