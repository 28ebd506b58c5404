"""System configuration and random generators for the uplink feedback link.

All generators take an explicit :class:`numpy.random.Generator` so that
callers control the stream.  Per-frame streams are derived with
:func:`frame_rng`, which makes frames independent of generation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for inconsistent system parameters."""


@dataclass(frozen=True)
class SystemConfig:
    """Link parameters.

    ``M`` and ``L`` are derived on access, so they can never drift out of
    sync with ``N``, ``c`` and ``P``.
    """

    N: int = 64
    P: int = 512
    c: float = 2.0
    K: int = 8
    rho: float = 0.10
    E_u: float = 1.0
    U: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.N <= 0:
            raise ConfigError(f"N must be positive, got {self.N}")
        if self.P <= 0 or self.P & (self.P - 1):
            raise ConfigError(f"P must be a power of two, got {self.P}")
        if self.c <= 0:
            raise ConfigError(f"c must be positive, got {self.c}")
        if not 1 <= self.K <= self.N:
            raise ConfigError(f"K must lie in [1, N={self.N}], got {self.K}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.E_u <= 0:
            raise ConfigError(f"E_u must be positive, got {self.E_u}")
        if self.M < 1:
            raise ConfigError("c * N rounds to zero measurements")
        if self.L > self.P:
            raise ConfigError(
                f"feedback needs L={self.L} symbols but P={self.P}; "
                "lower c or raise P")

    @property
    def M(self) -> int:
        # round-half-up, not banker's rounding
        return int(math.floor(self.c * self.N + 0.5))

    @property
    def n_feedback_bits(self) -> int:
        return 2 * self.M + self.N

    @property
    def L(self) -> int:
        return -(-self.n_feedback_bits // 2)


@dataclass
class CsiVector:
    values: np.ndarray
    support: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.support is None:
            self.support = np.flatnonzero(self.values)


def frame_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``, e.g. a frame index."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def crandn(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian samples with given variance."""
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def gen_sparse_csi(cfg: SystemConfig, rng: np.random.Generator) -> CsiVector:
    """K-sparse downlink CSI with CN(0, 1/N) non-zeros on a uniform support."""
    if cfg.K > cfg.N:
        raise ConfigError(f"K={cfg.K} exceeds N={cfg.N}")
    support = np.sort(rng.choice(cfg.N, size=cfg.K, replace=False))
    h = np.zeros(cfg.N, dtype=complex)
    h[support] = crandn(rng, cfg.K, 1.0 / cfg.N)
    return CsiVector(h, support)


def gen_uplink_channel(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. CN(0, 1/N) uplink channel; re-drawn if numerically zero."""
    while True:
        g = crandn(rng, cfg.N, 1.0 / cfg.N)
        if np.linalg.norm(g) >= 1e-9:
            return g


def gen_ulus_bits(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=2 * cfg.P, dtype=np.int8)


def gen_noise(cfg: SystemConfig, variance: float,
              rng: np.random.Generator) -> np.ndarray:
    """N x P CSCG noise matrix; all zeros when ``variance == 0``."""
    if variance == 0:
        return np.zeros((cfg.N, cfg.P), dtype=complex)
    return crandn(rng, (cfg.N, cfg.P), variance)


def snr_to_variance(snr_db: float, E_u: float = 1.0) -> float:
    """Noise variance for ``SNR = 10 log10(E_u / sigma^2)``."""
    if E_u <= 0:
        raise ConfigError("E_u must be positive")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return E_u / 10.0 ** (snr_db / 10.0)


def apply_uplink_channel(g: np.ndarray, x: np.ndarray,
                         noise: np.ndarray) -> np.ndarray:
    """Received matrix ``R = g x + N`` (outer product plus noise)."""
    g = np.asarray(g)
    x = np.asarray(x)
    if g.ndim != 1 or x.ndim != 1:
        raise ValueError("g and x must be 1-D")
    if noise.shape != (g.size, x.size):
        raise ValueError(
            f"noise shape {noise.shape} does not match ({g.size}, {x.size})")
    return np.outer(g, x) + noise
