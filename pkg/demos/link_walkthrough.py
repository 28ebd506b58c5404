"""
One feedback frame, end to end
==============================

Follows a single frame through the link: sparse downlink CSI is compressed
to sign bits, the bits ride on QPSK symbols spread by Walsh codes and
superimposed on user data, the base station equalizes the uplink and pulls
both streams back out.  Uses the classical (non-learned) receiver so it runs
in a second.

    python demos/link_walkthrough.py
"""
import math

import numpy as np

from onebit_csi import SystemConfig, Link, gen_frame
from onebit_csi.detector import baseline_detect
from onebit_csi.frontend import real_to_complex
from onebit_csi.harness import mfv_bits, BaselineReceiver
from onebit_csi.onebit_codec import demodulate_bits
from onebit_csi.signal_model import frame_rng

cfg = SystemConfig(N=32, P=128, c=2.0, K=4, rho=0.1, seed=5)
link = Link.from_config(cfg)
print(f"N={cfg.N} antennas, K={cfg.K} paths, M={cfg.M} measurements, "
      f"{cfg.n_feedback_bits} feedback bits on L={cfg.L} spread symbols")

# the downlink channel is K-sparse; only the support and the signs survive
f = gen_frame(link, snr_db=math.inf, rng=frame_rng(cfg.seed, 7, 0))
print("non-zero CSI entries:", np.flatnonzero(f.h.values))
print("first feedback bits:", f.feedback_bits[:16])

# the transmitted frame mixes spread feedback (power rho) with data (1 - rho)
print(f"frame power {np.mean(abs(f.x) ** 2):.3f} (target {cfg.E_u})")

# with no noise, ZF hands back the frame exactly
print(f"ZF error without noise: {np.abs(f.x_hat - f.x).max():.1e}")

# the same frame over a noisy uplink
for snr in (0.0, 10.0, 20.0):
    f = gen_frame(link, snr, frame_rng(cfg.seed, 7, 1))
    w_hat, d_hat = baseline_detect(f.x_real[None], cfg)
    fb_err = np.mean(mfv_bits(w_hat, cfg)[0] != f.feedback_bits)
    ud_err = np.mean(demodulate_bits(real_to_complex(d_hat))[0] != f.ulus_bits)
    h_hat = BaselineReceiver(link, beta=100).reconstruct(mfv_bits(w_hat, cfg))[0]
    h = f.h_real
    nmse = np.sum((h_hat - h) ** 2) / np.sum(h ** 2)
    print(f"SNR {snr:4.0f} dB: feedback bit errors {fb_err:.3f}, "
          f"data bit errors {ud_err:.3f}, CSI NMSE {nmse:.3f}")
