"""Walsh spreading of the feedback symbols and its real-valued block form."""
from __future__ import annotations

import numpy as np
from scipy.linalg import hadamard


def gen_walsh(P: int, L: int) -> np.ndarray:
    """First ``L`` rows of the Sylvester Hadamard matrix of order ``P``.

    Returned as an integer array so that ``Q @ Q.T == P * I`` holds exactly.
    """
    if P < 1 or P & (P - 1):
        raise ValueError(f"P must be a power of two, got {P}")
    if not 1 <= L <= P:
        raise ValueError(f"need 1 <= L <= P, got L={L}, P={P}")
    return hadamard(P, dtype=np.int64)[:L]


def spread(w: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``s = w Q / sqrt(L)``; ``w`` may carry leading batch axes."""
    w = np.asarray(w)
    L = Q.shape[0]
    if w.shape[-1] != L:
        raise ValueError(f"expected {L} symbols, got {w.shape[-1]}")
    return (w @ Q) / np.sqrt(L)


def real_block(Q: np.ndarray) -> np.ndarray:
    """Block-diagonal ``[[Q, 0], [0, Q]]`` acting on ``[Re, Im]`` rails."""
    L, P = Q.shape
    out = np.zeros((2 * L, 2 * P), dtype=Q.dtype)
    out[:L, :P] = Q
    out[L:, P:] = Q
    return out


def despread(v: np.ndarray, Q_real: np.ndarray) -> np.ndarray:
    """Unnormalized correlation ``v Q_real^T`` (2P rails -> 2L rails)."""
    v = np.asarray(v)
    if v.shape[-1] != Q_real.shape[1]:
        raise ValueError(
            f"expected length {Q_real.shape[1]}, got {v.shape[-1]}")
    return v @ Q_real.T
