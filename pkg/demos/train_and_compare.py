"""
Learned receiver against the classical one
==========================================

Trains the detection and refinement networks on the desk-scale link in
``configs/scaled.cfg`` (a few minutes on one core), then measures both
receivers over an SNR grid with the 1000-error stopping rule.

    python demos/train_and_compare.py [path/to/config.cfg]
"""
import sys
from pathlib import Path

from onebit_csi import load_config
from onebit_csi import harness as H

cfg_path = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "configs/scaled.cfg"
exp = load_config(cfg_path)
link = H.Link.from_config(exp.system)

detector, det_hist = H.train_detection_stage(exp, link, save=False)
print(f"detector val loss {det_hist[0][2]:.1f} -> {min(h[2] for h in det_hist):.1f}")
refiner, rec_hist = H.train_reconstruction_stage(exp, detector, link, save=False)
print(f"refiner val loss {rec_hist[0][2]:.3f} -> {min(h[2] for h in rec_hist):.3f}")

receivers = [H.ProposedReceiver(link, detector, refiner, exp.eval.proposed_beta),
             H.BaselineReceiver(link, 10, exp.eval.baseline_iters)]
print(f"{'scheme':>13} {'SNR':>4} {'UL-US BER':>10} {'MFV BER':>9} {'NMSE':>7} {'frames':>7}")
for i, snr in enumerate(exp.eval.snr_db):
    for recv in receivers:
        r = H.evaluate_point(recv, link, snr, i, min_frames=exp.eval.min_frames, timing=False)
        print(f"{r.scheme:>13} {snr:4.0f} {r.ber_ulus:10.2e} {r.ber_mfv:9.2e} "
              f"{r.nmse:7.3f} {r.frames_used:7d}")
