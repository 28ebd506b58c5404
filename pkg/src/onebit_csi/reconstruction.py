"""CSI reconstruction from detected feedback bits.

A few iterations of support-aided binary iterative hard thresholding
(SCA-BIHT) give a unit-norm initial estimate, which a single-hidden-layer
refinement network maps to the final real-rail CSI estimate.

The BIHT residual uses the 0/1 ``sign01`` convention (zero maps to 0), so
``y - sign01(h phi)`` takes values in {-1, 0, 1} rather than the {-2, 0, 2}
of textbook BIHT.  There is no step size: hard thresholding to ``k`` terms
and masking by the decoded support follow every gradient step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .detector import NumericFailure
from .frontend import complex_to_real
from .nn_core import (AdamState, SubnetParams, adam_step, l2_penalty,
                      named_tensors, subnet_backward, subnet_forward,
                      update_running_stats)
from .onebit_codec import estimate_sparsity, sign01

log = logging.getLogger(__name__)


def best_k_approx(x, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries; ties keep the lower index."""
    x = np.asarray(x)
    if not 0 <= k <= x.size:
        raise ValueError(f"k={k} outside [0, {x.size}]")
    order = np.argsort(-np.abs(x), kind="stable")
    out = np.zeros_like(x)
    keep = order[:k]
    out[keep] = x[keep]
    return out


def best_k_approx_rows(X, k) -> np.ndarray:
    """Row-wise :func:`best_k_approx` with a per-row ``k``."""
    X = np.asarray(X)
    k = np.broadcast_to(np.asarray(k), (X.shape[0],))
    order = np.argsort(-np.abs(X), axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(X.shape[0])[:, None]
    rank[rows, order] = np.arange(X.shape[1])
    return np.where(rank < k[:, None], X, 0)


@dataclass
class ReconstructionInput:
    y_real: np.ndarray
    y_imag: np.ndarray
    z: np.ndarray
    phi: np.ndarray
    beta: int = 8

    @property
    def k(self) -> int:
        return estimate_sparsity(self.z)


def sca_biht(y_real, y_imag, z, phi: np.ndarray, beta: int = 8,
             k: int | None = None) -> tuple[np.ndarray, bool]:
    """Initial CSI estimate from 1-bit measurements and support bits.

    Parameters
    ----------
    y_real, y_imag : array of {0, 1}, length M
        Decoded sign bits of the real and imaginary measurements.
    z : array of {0, 1}, length N
        Decoded support bits; every iterate is masked by them.
    phi : (N, M) array
        Measurement matrix shared with the compressor.
    beta : int
        Number of iterations.
    k : int, optional
        Sparsity used for thresholding, by default ``max(popcount(z), 1)``.

    Returns
    -------
    h : complex array, length N
        Unit-norm estimate, or all zeros when the iterate vanished.
    degenerate : bool
        True when the zero vector was returned.
    """
    if beta < 1:
        raise ValueError("beta must be at least 1")
    k = estimate_sparsity(z) if k is None else k
    yr = np.asarray(y_real, dtype=float)
    yi = np.asarray(y_imag, dtype=float)
    mask = np.asarray(z, dtype=float)
    N = phi.shape[0]
    hr = np.zeros(N)
    hi = np.zeros(N)
    for _ in range(beta):
        hr = best_k_approx(hr + (yr - sign01(hr @ phi)) @ phi.T, k) * mask
        hi = best_k_approx(hi + (yi - sign01(hi @ phi)) @ phi.T, k) * mask
    norm = np.sqrt(hr @ hr + hi @ hi)
    if norm == 0:
        return np.zeros(N, dtype=complex), True
    # rails are scaled separately so the result is plain real arithmetic
    return (hr / norm) + 1j * (hi / norm), False


def sca_biht_batch(Y_real, Y_imag, Z, phi: np.ndarray, beta: int = 8):
    """Vectorized :func:`sca_biht` over rows.

    Agrees with the per-sample routine up to floating-point summation order.
    Returns ``(H, degenerate)`` with ``H`` of shape ``(B, N)``.
    """
    Yr = np.asarray(Y_real, dtype=float)
    Yi = np.asarray(Y_imag, dtype=float)
    mask = np.asarray(Z, dtype=float)
    k = np.maximum(np.count_nonzero(mask, axis=1), 1)
    B, N = mask.shape
    hr = np.zeros((B, N))
    hi = np.zeros((B, N))
    for _ in range(beta):
        hr = best_k_approx_rows(hr + (Yr - sign01(hr @ phi)) @ phi.T, k) * mask
        hi = best_k_approx_rows(hi + (Yi - sign01(hi @ phi)) @ phi.T, k) * mask
    norm = np.sqrt(np.sum(hr * hr, axis=1) + np.sum(hi * hi, axis=1))
    degenerate = norm == 0
    scale = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, norm))
    return (hr * scale[:, None]) + 1j * (hi * scale[:, None]), degenerate


# --- refinement network ----------------------------------------------------

class RefinementNetwork:
    """2N -> 4N -> 2N dense net with input batch norm and linear output."""

    def __init__(self, params: SubnetParams, trained: bool = False):
        n_in, n_hidden, n_out = params.dims
        if n_hidden != 2 * n_in or n_out != n_in or n_in % 2:
            raise ValueError(f"refinement dims {params.dims} are not (2N, 4N, 2N)")
        if params.out_activation != "linear":
            raise ValueError("refinement network must have a linear output")
        self.params = params
        self.trained = trained

    @classmethod
    def init(cls, N: int, rng: np.random.Generator, slope: float = 0.01):
        return cls(SubnetParams.init(2 * N, 4 * N, 2 * N, rng, "linear", slope))

    @property
    def N(self) -> int:
        return self.params.dims[0] // 2

    def subnets(self) -> dict[str, SubnetParams]:
        return {"refiner": self.params}

    def copy(self):
        return RefinementNetwork(self.params.copy(), self.trained)


def refine(h_tilde, net: RefinementNetwork) -> np.ndarray:
    """Refined real-rail estimate ``[Re, Im]`` from the complex initial estimate."""
    h_tilde = np.asarray(h_tilde)
    if h_tilde.shape[-1] != net.N:
        raise ValueError(f"expected length {net.N}, got {h_tilde.shape[-1]}")
    y, _ = subnet_forward(net.params, complex_to_real(np.atleast_2d(h_tilde)))
    return y[0] if h_tilde.ndim == 1 else y


def reconstruction_loss(h_hat, h_real, net: RefinementNetwork, alpha2: float = 0.0) -> float:
    """Batch-averaged squared error plus the L2 penalty."""
    h_hat = np.atleast_2d(h_hat)
    h_real = np.atleast_2d(h_real)
    mse = np.sum((h_hat - h_real) ** 2) / h_real.shape[0]
    penalty, _ = l2_penalty(net.subnets(), alpha2)
    return float(mse + penalty)


def reconstruction_grads(net: RefinementNetwork, X, h_real, alpha2: float = 0.0):
    """Training-mode loss and gradients for a batch of real-rail inputs ``X``."""
    y, cache = subnet_forward(net.params, X, train=True)
    loss = reconstruction_loss(y, h_real, net, alpha2)
    g, _ = subnet_backward(net.params, cache, 2.0 * (y - h_real) / y.shape[0])
    grads = {f"refiner.{k}": v for k, v in g.items()}
    _, g_pen = l2_penalty(net.subnets(), alpha2)
    for k, v in g_pen.items():
        grads[k] = grads[k] + v
    return loss, grads, cache


def _val_loss(net, X, h_real, alpha2):
    y, _ = subnet_forward(net.params, X)
    return reconstruction_loss(y, h_real, net, alpha2)


def train_refiner(train_set, val_set, N: int, alpha2: float = 1e-5,
                  epochs: int = 50, lr: float = 1e-3, batch_size: int = 200,
                  rng: np.random.Generator | None = None, slope: float = 0.01,
                  net: RefinementNetwork | None = None):
    """Train the refinement network on ``(h_tilde_real, h_real)`` pairs.

    Returns the best-validation network and ``(epoch, train, val)`` history.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    X, H = (np.asarray(a, dtype=float) for a in train_set)
    Xv, Hv = (np.asarray(a, dtype=float) for a in val_set)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    net = net if net is not None else RefinementNetwork.init(N, rng, slope)
    params = named_tensors(net.subnets())
    state = AdamState(lr=lr)
    best_val = _val_loss(net, Xv, Hv, alpha2)
    best = net.copy()
    history = [(0, float("nan"), best_val)]
    n = X.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        n_batches = max(n // batch_size, 1)
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            loss, grads, cache = reconstruction_grads(net, X[idx], H[idx], alpha2)
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite reconstruction loss at epoch {epoch}")
            adam_step(params, grads, state)
            update_running_stats(net.params, cache)
            net.params.version += 1
            running += loss
        val = _val_loss(net, Xv, Hv, alpha2)
        history.append((epoch, running / n_batches, val))
        log.info("refiner epoch %d train %.5f val %.5f", epoch, running / n_batches, val)
        if val < best_val:
            best_val = val
            best = net.copy()
    best.trained = True
    return best, history
