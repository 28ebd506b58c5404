"""
Sparse CSI from sign bits
=========================

Recovers K-sparse complex vectors from 1-bit measurements plus the support
bitmap with SCA-BIHT, without any uplink in the way.  Sign bits carry
direction only, so the estimate is compared after matching its energy to the
prior mean K/N.

    python demos/reconstruction_from_bits.py
"""
import numpy as np

from onebit_csi import SystemConfig, sca_biht
from onebit_csi.onebit_codec import compress_1bit, gen_measurement_matrix, support_bits
from onebit_csi.signal_model import frame_rng, gen_sparse_csi

for c in (1.0, 2.0, 3.0):
    cfg = SystemConfig(N=64, P=512, c=c, K=8, rho=0.1, seed=3)
    phi = gen_measurement_matrix(cfg.N, cfg.M, frame_rng(cfg.seed, 0))
    for beta in (8, 100):
        nmse = []
        for i in range(200):
            h = gen_sparse_csi(cfg, frame_rng(cfg.seed, 1, i))
            y_r, y_i = compress_1bit(h, phi)
            est, _ = sca_biht(y_r, y_i, support_bits(h), phi, beta)
            est *= np.sqrt(cfg.K / cfg.N)
            nmse.append(np.sum(abs(est - h.values) ** 2) / np.sum(abs(h.values) ** 2))
        print(f"c={c:.1f} (M={cfg.M:3d})  beta={beta:3d}  mean NMSE {np.mean(nmse):.3f}")
