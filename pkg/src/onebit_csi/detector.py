"""Unfolded multi-task detector for superimposed feedback and uplink data.

Three stages, each a CSI subnet (feedback symbols) followed by a data
subnet, with linear interference-reduction steps in between::

    w~(1) = x
    for i in 1..3:
        w^(i) = CSI-Net_i( despread(w~(i)) )
        d~(i) = x - sqrt(rho E / L) w^(i) Q_real          (CSI IR)
        d^(i) = Det-Net_i( d~(i) )
        w~(i+1) = x - sqrt((1 - rho) E) d^(i)             (UL-US IR, i < 3)

Everything operates on real rails ``[Re, Im]`` with batches as rows.  The
IR steps and despreading are fixed linear maps, so training backpropagates
through the whole cascade.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .nn_core import (AdamState, SubnetParams, adam_step, l2_penalty,
                      named_tensors, subnet_backward, subnet_forward,
                      update_running_stats)
from .onebit_codec import INV_SQRT2, hard_bits
from .spreading import despread, gen_walsh, real_block

log = logging.getLogger(__name__)

N_STAGES = 3


class UntrainedNetworkWarning(UserWarning):
    pass


class NumericFailure(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class DetectionNetwork:
    csi_nets: list
    det_nets: list
    rho: float
    E_u: float
    L: int
    P: int
    trained: bool = False

    def __post_init__(self):
        if len(self.csi_nets) != N_STAGES or len(self.det_nets) != N_STAGES:
            raise ValueError("detection network needs exactly three subnet pairs")
        for net in self.csi_nets:
            if net.dims != (2 * self.L, 4 * self.L, 2 * self.L):
                raise ValueError(f"CSI subnet dims {net.dims} do not match L={self.L}")
        for net in self.det_nets:
            if net.dims != (2 * self.P, 4 * self.P, 2 * self.P):
                raise ValueError(f"data subnet dims {net.dims} do not match P={self.P}")

    @classmethod
    def init(cls, cfg, rng: np.random.Generator, slope: float = 0.01):
        L, P = cfg.L, cfg.P
        csi = [SubnetParams.init(2 * L, 4 * L, 2 * L, rng, "tanh", slope)
               for _ in range(N_STAGES)]
        det = [SubnetParams.init(2 * P, 4 * P, 2 * P, rng, "tanh", slope)
               for _ in range(N_STAGES)]
        return cls(csi, det, cfg.rho, cfg.E_u, L, P)

    @classmethod
    def zeros(cls, cfg):
        L, P = cfg.L, cfg.P
        return cls([SubnetParams.zeros(2 * L, 4 * L, 2 * L) for _ in range(N_STAGES)],
                   [SubnetParams.zeros(2 * P, 4 * P, 2 * P) for _ in range(N_STAGES)],
                   cfg.rho, cfg.E_u, L, P)

    @cached_property
    def Q_real(self) -> np.ndarray:
        return real_block(gen_walsh(self.P, self.L)).astype(float)

    def subnets(self) -> dict[str, SubnetParams]:
        out = {}
        for i in range(N_STAGES):
            out[f"csi{i + 1}"] = self.csi_nets[i]
            out[f"det{i + 1}"] = self.det_nets[i]
        return out

    def expected_dims(self) -> dict[str, tuple]:
        return {k: v.dims for k, v in self.subnets().items()}

    @classmethod
    def from_subnets(cls, nets: dict, rho, E_u, L, P, trained=True):
        return cls([nets[f"csi{i + 1}"] for i in range(N_STAGES)],
                   [nets[f"det{i + 1}"] for i in range(N_STAGES)],
                   rho, E_u, L, P, trained)

    def copy(self):
        return DetectionNetwork.from_subnets(
            {k: v.copy() for k, v in self.subnets().items()},
            self.rho, self.E_u, self.L, self.P, self.trained)


@dataclass
class DetectionOutput:
    w_hat_stages: list
    d_hat_stages: list
    caches: dict = field(default=None, repr=False)

    @property
    def w_hat(self) -> np.ndarray:
        return self.w_hat_stages[-1]

    @property
    def d_hat(self) -> np.ndarray:
        return self.d_hat_stages[-1]


def csi_ir(x_real, w_hat, Q_real, rho, E_u, L):
    """Remove the re-spread feedback estimate from the coarse signal."""
    if np.shape(w_hat)[-1] != Q_real.shape[0]:
        raise ValueError("feedback estimate does not match spreading matrix")
    return x_real - math.sqrt(rho * E_u / L) * (w_hat @ Q_real)


def ulus_ir(x_real, d_hat, rho, E_u):
    """Remove the weighted data estimate from the coarse signal."""
    if np.shape(d_hat)[-1] != np.shape(x_real)[-1]:
        raise ValueError("data estimate does not match the coarse signal")
    return x_real - math.sqrt((1 - rho) * E_u) * d_hat


def detect_forward(net: DetectionNetwork, x_real, train: bool = False) -> DetectionOutput:
    """Run the three-stage cascade on rows of ``x_real`` (length 2P)."""
    x = np.atleast_2d(np.asarray(x_real, dtype=float))
    if x.shape[1] != 2 * net.P:
        raise ValueError(f"expected rows of length {2 * net.P}, got {x.shape[1]}")
    if not train and not net.trained:
        warnings.warn("running an untrained detection network",
                      UntrainedNetworkWarning, stacklevel=2)
    Qr = net.Q_real
    w_stages, d_stages = [], []
    caches = {} if train else None
    w_tilde = x
    for i in range(N_STAGES):
        w_hat, c_cache = subnet_forward(net.csi_nets[i], despread(w_tilde, Qr), train)
        d_tilde = csi_ir(x, w_hat, Qr, net.rho, net.E_u, net.L)
        d_hat, d_cache = subnet_forward(net.det_nets[i], d_tilde, train)
        w_stages.append(w_hat)
        d_stages.append(d_hat)
        if train:
            caches[f"csi{i + 1}"] = c_cache
            caches[f"det{i + 1}"] = d_cache
        if i < N_STAGES - 1:
            w_tilde = ulus_ir(x, d_hat, net.rho, net.E_u)
    return DetectionOutput(w_stages, d_stages, caches)


def detection_loss(out: DetectionOutput, d_real, w_real, net: DetectionNetwork,
                   alpha1: float = 0.0) -> float:
    """Six-term stage loss, batch-averaged, plus the L2 penalty."""
    d_real = np.atleast_2d(d_real)
    w_real = np.atleast_2d(w_real)
    total = 0.0
    for w_hat, d_hat in zip(out.w_hat_stages, out.d_hat_stages):
        total += np.sum((d_hat - d_real) ** 2) + np.sum((w_hat - w_real) ** 2)
    loss = total / (2 * N_STAGES * d_real.shape[0])
    penalty, _ = l2_penalty(net.subnets(), alpha1)
    return float(loss + penalty)


def detection_grads(net: DetectionNetwork, x_real, d_real, w_real, alpha1: float = 0.0):
    """Loss and gradients of all six subnets from one training-mode pass.

    Returns ``(loss, grads, out)``; ``grads`` is keyed like
    :func:`onebit_csi.nn_core.named_tensors` over ``net.subnets()``.
    """
    x = np.atleast_2d(np.asarray(x_real, dtype=float))
    d_real = np.atleast_2d(d_real)
    w_real = np.atleast_2d(w_real)
    out = detect_forward(net, x, train=True)
    loss = detection_loss(out, d_real, w_real, net, alpha1)

    scale = 2.0 / (2 * N_STAGES * x.shape[0])
    a = math.sqrt(net.rho * net.E_u / net.L)
    b = math.sqrt((1 - net.rho) * net.E_u)
    Qr = net.Q_real
    grads = {}
    dw_tilde_next = None
    for i in reversed(range(N_STAGES)):
        dd_hat = scale * (out.d_hat_stages[i] - d_real)
        if dw_tilde_next is not None:
            dd_hat = dd_hat - b * dw_tilde_next
        g_det, dd_tilde = subnet_backward(net.det_nets[i], out.caches[f"det{i + 1}"], dd_hat)
        dw_hat = scale * (out.w_hat_stages[i] - w_real) - a * (dd_tilde @ Qr.T)
        g_csi, du = subnet_backward(net.csi_nets[i], out.caches[f"csi{i + 1}"], dw_hat)
        dw_tilde_next = du @ Qr
        for k, v in g_det.items():
            grads[f"det{i + 1}.{k}"] = v
        for k, v in g_csi.items():
            grads[f"csi{i + 1}.{k}"] = v

    _, g_pen = l2_penalty(net.subnets(), alpha1)
    for k, v in g_pen.items():
        grads[k] = grads[k] + v
    return loss, grads, out


def evaluate_loss(net: DetectionNetwork, x_real, d_real, w_real, alpha1=0.0,
                  chunk: int = 2000) -> float:
    """Inference-mode loss over a dataset, computed in chunks."""
    n = x_real.shape[0]
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UntrainedNetworkWarning)
        for s in range(0, n, chunk):
            out = detect_forward(net, x_real[s:s + chunk])
            part = detection_loss(out, d_real[s:s + chunk], w_real[s:s + chunk], net, 0.0)
            total += part * min(chunk, n - s)
    penalty, _ = l2_penalty(net.subnets(), alpha1)
    return total / n + penalty


def train_detector(train_set, val_set, cfg, alpha1: float = 1e-6,
                   epochs: int = 50, lr: float = 1e-3, batch_size: int = 200,
                   rng: np.random.Generator | None = None, slope: float = 0.01,
                   net: DetectionNetwork | None = None):
    """Jointly train the six subnets with Adam.

    ``train_set`` and ``val_set`` are ``(x_real, d_real, w_real)`` triples.
    Returns the network with the best validation loss and a history list of
    ``(epoch, train_loss, val_loss)`` tuples.  Epoch 0 records the initial
    validation loss.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x, d, w = (np.asarray(a, dtype=float) for a in train_set)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    if net is None:
        net = DetectionNetwork.init(cfg, rng, slope)
    nets = net.subnets()
    params = named_tensors(nets)
    state = AdamState(lr=lr)

    best_val = evaluate_loss(net, *val_set, alpha1=alpha1)
    best = net.copy()
    history = [(0, float("nan"), best_val)]
    n = x.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        running, count = 0.0, 0
        # trailing partial batch is dropped; BN needs full batches
        for b in range(max(n // batch_size, 1)):
            idx = order[b * batch_size:(b + 1) * batch_size]
            loss, grads, out = detection_grads(net, x[idx], d[idx], w[idx], alpha1)
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite detection loss at epoch {epoch}")
            adam_step(params, grads, state)
            for key, sub in nets.items():
                update_running_stats(sub, out.caches[key])
                sub.version += 1
            running += loss * len(idx)
            count += len(idx)
        val = evaluate_loss(net, *val_set, alpha1=alpha1)
        if not np.isfinite(val):
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, running / count, val))
        log.info("detector epoch %d train %.5f val %.5f", epoch, running / count, val)
        if val < best_val:
            best_val = val
            best = net.copy()
    best.trained = True
    return best, history


def slice_qpsk(v) -> np.ndarray:
    """Nearest QPSK rail value (+-1/sqrt(2)) for each real rail."""
    return (1.0 - 2.0 * hard_bits(v)) * INV_SQRT2


def baseline_detect(x_real, cfg, iters: int = 3):
    """Non-learned iterative interference cancellation.

    Mirrors the unfolded cascade with hard decisions in place of subnets:
    the feedback symbols are sliced from the despread residual and the data
    symbols from the CSI-cancelled signal.  Slicing is sign based, so the
    positive de-scaling factors of the linear model are not applied.
    Returns ``(w_hat, d_hat)`` as real rails.
    """
    x = np.atleast_2d(np.asarray(x_real, dtype=float))
    Qr = real_block(gen_walsh(cfg.P, cfg.L)).astype(float)
    w_tilde = x
    w_hat = d_hat = None
    for _ in range(iters):
        w_hat = slice_qpsk(despread(w_tilde, Qr))
        d_tilde = csi_ir(x, w_hat, Qr, cfg.rho, cfg.E_u, cfg.L)
        d_hat = slice_qpsk(d_tilde)
        w_tilde = ulus_ir(x, d_hat, cfg.rho, cfg.E_u)
    return w_hat, d_hat
