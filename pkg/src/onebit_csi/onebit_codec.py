"""1-bit compression of the CSI, feedback bit framing and QPSK mapping.

Bit convention: ``sign01`` returns 1 for strictly positive inputs and 0
otherwise (zero maps to 0).  The QPSK map sends bit 0 to the positive rail
and bit 1 to the negative rail, so a rail value ``v`` decides bit 1 iff
``v <= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INV_SQRT2 = 1.0 / np.sqrt(2.0)


def gen_measurement_matrix(N: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """N x M Gaussian measurement matrix with entry variance 1/M."""
    if N <= 0 or M <= 0:
        raise ValueError("N and M must be positive")
    return rng.standard_normal((N, M)) / np.sqrt(M)


def sign01(v) -> np.ndarray:
    return (np.asarray(v) > 0).astype(np.int8)


def compress_1bit(h, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signs of the real and imaginary measurements ``Re(h) phi``, ``Im(h) phi``."""
    h = np.asarray(getattr(h, "values", h))
    if h.shape[-1] != phi.shape[0]:
        raise ValueError(
            f"CSI length {h.shape[-1]} does not match measurement matrix "
            f"rows {phi.shape[0]}")
    return sign01(h.real @ phi), sign01(h.imag @ phi)


def support_bits(h) -> np.ndarray:
    h = np.asarray(getattr(h, "values", h))
    return (h != 0).astype(np.int8)


def estimate_sparsity(z) -> int:
    """Number of ones in the support bits, floored at 1."""
    return max(int(np.count_nonzero(z)), 1)


@dataclass
class FeedbackBits:
    y_real: np.ndarray
    y_imag: np.ndarray
    z: np.ndarray
    padded: bool = False

    @property
    def bits(self) -> np.ndarray:
        parts = [self.y_real, self.y_imag, self.z]
        if self.padded:
            parts.append(np.zeros(1, dtype=np.int8))
        return np.concatenate(parts).astype(np.int8)

    def __len__(self):
        return self.bits.size


def assemble_feedback(y_real, y_imag, z) -> FeedbackBits:
    y_real = np.asarray(y_real, dtype=np.int8)
    y_imag = np.asarray(y_imag, dtype=np.int8)
    z = np.asarray(z, dtype=np.int8)
    if y_real.size != y_imag.size:
        raise ValueError("real and imaginary measurement bits differ in length")
    n = 2 * y_real.size + z.size
    return FeedbackBits(y_real, y_imag, z, padded=bool(n % 2))


def disassemble_feedback(bits, M: int, N: int) -> FeedbackBits:
    """Split a (possibly padded) bit stream back into its three segments."""
    bits = np.asarray(bits, dtype=np.int8)
    n = 2 * M + N
    if bits.size not in (n, n + 1) or (bits.size == n + 1) != bool(n % 2):
        raise ValueError(f"expected {n + n % 2} bits for M={M}, N={N}, "
                         f"got {bits.size}")
    return FeedbackBits(bits[:M].copy(), bits[M:2 * M].copy(),
                        bits[2 * M:n].copy(), padded=bool(n % 2))


def qpsk_modulate(p) -> np.ndarray:
    """Map bit pairs ``(b0, b1)`` to ``((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)``.

    Accepts a :class:`FeedbackBits` (padding applied) or a raw bit array
    whose last axis has even length.
    """
    bits = p.bits if isinstance(p, FeedbackBits) else np.asarray(p)
    if bits.shape[-1] % 2:
        raise ValueError("odd bit count; assemble_feedback pads odd streams")
    b = bits.reshape(*bits.shape[:-1], -1, 2).astype(float)
    return ((1.0 - 2.0 * b[..., 0]) + 1j * (1.0 - 2.0 * b[..., 1])) * INV_SQRT2


def hard_bits(v) -> np.ndarray:
    """Per-rail bit decisions; non-positive values decide bit 1."""
    return (np.asarray(v) <= 0).astype(np.int8)


def demodulate_bits(symbols) -> np.ndarray:
    """Hard QPSK decisions, interleaved back to ``[b0, b1, b0, b1, ...]``."""
    s = np.asarray(symbols)
    b = np.stack([hard_bits(s.real), hard_bits(s.imag)], axis=-1)
    return b.reshape(*s.shape[:-1], -1)


def qpsk_demodulate(w_hat, M, N: int | None = None):
    """Inverse mapping of received MFV symbols to ``(y_real, y_imag, z)``.

    ``M`` may be a :class:`SystemConfig`, in which case ``N`` is taken from
    it.  Works on a single symbol vector or a batch (last axis = symbols).
    """
    if N is None:
        M, N = M.M, M.N
    w_hat = np.asarray(w_hat)
    n = 2 * M + N
    L = -(-n // 2)
    if w_hat.shape[-1] != L:
        raise ValueError(f"expected {L} symbols for M={M}, N={N}, "
                         f"got {w_hat.shape[-1]}")
    bits = demodulate_bits(w_hat)
    return bits[..., :M], bits[..., M:2 * M], bits[..., 2 * M:n]
