"""Transmit superposition, zero-forcing feature extraction and rail mappings."""
from __future__ import annotations

import numpy as np


def superimpose(s, d, rho: float, E_u: float = 1.0) -> np.ndarray:
    """``x = sqrt(rho E) s + sqrt((1 - rho) E) d``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if E_u <= 0:
        raise ValueError("E_u must be positive")
    return np.sqrt(rho * E_u) * np.asarray(s) + np.sqrt((1 - rho) * E_u) * np.asarray(d)


def zf_equalize(g, R) -> np.ndarray:
    """Coarse estimate ``x_hat = g^+ R`` with ``g^+ = g^H / ||g||^2``."""
    g = np.asarray(g)
    energy = np.vdot(g, g).real
    if energy == 0:
        raise ValueError("cannot equalize an all-zero channel")
    return (g.conj() @ R) / energy


def complex_to_real(v) -> np.ndarray:
    """``[Re(v), Im(v)]`` along the last axis."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1)


def real_to_complex(v) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[-1] % 2:
        raise ValueError("real form must have even length")
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]
