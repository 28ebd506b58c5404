"""Frame simulation, two-stage training and Monte-Carlo evaluation.

Random streams are keyed by ``(seed, purpose, ...)`` through
:func:`~onebit_csi.signal_model.frame_rng`, so any frame can be regenerated
on its own and every scheme is scored on the same frames.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_config
from .detector import (DetectionNetwork, UntrainedNetworkWarning,
                       baseline_detect, detect_forward, train_detector)
from .frontend import complex_to_real, real_to_complex, superimpose, zf_equalize
from .nn_core import (BN_EPS, BN_MOMENTUM, ConfigMismatchError, load_checkpoint,
                      save_checkpoint)
from .onebit_codec import (assemble_feedback, compress_1bit, demodulate_bits,
                           gen_measurement_matrix, qpsk_demodulate,
                           qpsk_modulate, support_bits)
from .reconstruction import (RefinementNetwork, refine, sca_biht_batch,
                             train_refiner)
from .signal_model import (CsiVector, SystemConfig, apply_uplink_channel,
                           frame_rng, gen_noise, gen_sparse_csi,
                           gen_ulus_bits, gen_uplink_channel, snr_to_variance)
from .spreading import gen_walsh, real_block, spread

log = logging.getLogger(__name__)

# stream purposes
PHI, DET_TRAIN, DET_VAL, DET_TEST, REC_TRAIN, REC_VAL, REC_TEST, EVAL, NET_INIT = range(9)

NOISE_FREE = math.inf
CSV_TAG = "# onebit-csi results v1"
CSV_COLUMNS = ("scheme", "snr_db", "ber_ulus", "ber_mfv", "nmse",
               "frames_used", "bit_errors_observed", "wall_clock_s")


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class Link:
    """Fixed per-experiment quantities shared by transmitter and receiver."""

    cfg: SystemConfig
    phi: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_config(cls, cfg: SystemConfig, phi: np.ndarray | None = None) -> "Link":
        if phi is None:
            phi = gen_measurement_matrix(cfg.N, cfg.M, frame_rng(cfg.seed, PHI))
        if phi.shape != (cfg.N, cfg.M):
            raise ConfigMismatchError(
                f"measurement matrix shape {phi.shape} != ({cfg.N}, {cfg.M})")
        return cls(cfg, phi, gen_walsh(cfg.P, cfg.L))

    @property
    def Q_real(self) -> np.ndarray:
        return real_block(self.Q).astype(float)


@dataclass
class FrameSample:
    h: CsiVector
    g: np.ndarray
    ulus_bits: np.ndarray
    feedback_bits: np.ndarray  # y_real, y_imag, z without padding
    d: np.ndarray
    w: np.ndarray
    x: np.ndarray
    R: np.ndarray
    x_hat: np.ndarray
    noise_variance: float

    @property
    def x_real(self):
        return complex_to_real(self.x_hat)

    @property
    def d_real(self):
        return complex_to_real(self.d)

    @property
    def w_real(self):
        return complex_to_real(self.w)

    @property
    def h_real(self):
        return complex_to_real(self.h.values)


def gen_frame(link: Link, snr_db: float, rng: np.random.Generator) -> FrameSample:
    """Simulate one feedback frame end to end up to the ZF feature.

    ``snr_db = inf`` gives an exactly noise-free frame.
    """
    cfg = link.cfg
    h = gen_sparse_csi(cfg, rng)
    g = gen_uplink_channel(cfg, rng)
    ulus = gen_ulus_bits(cfg, rng)
    y_real, y_imag = compress_1bit(h, link.phi)
    fb = assemble_feedback(y_real, y_imag, support_bits(h))
    w = qpsk_modulate(fb)
    d = qpsk_modulate(ulus)
    x = superimpose(spread(w, link.Q), d, cfg.rho, cfg.E_u)
    var = snr_to_variance(snr_db, cfg.E_u)
    R = apply_uplink_channel(g, x, gen_noise(cfg, var, rng))
    x_hat = zf_equalize(g, R)
    return FrameSample(h, g, ulus, fb.bits[:cfg.n_feedback_bits], d, w, x, R,
                       x_hat, var)


@dataclass
class FrameBatch:
    x_real: np.ndarray
    d_real: np.ndarray
    w_real: np.ndarray
    h: np.ndarray
    ulus_bits: np.ndarray
    feedback_bits: np.ndarray

    def __len__(self):
        return self.x_real.shape[0]

    @property
    def h_real(self):
        return complex_to_real(self.h)

    def detection_triple(self):
        return self.x_real, self.d_real, self.w_real

    def save(self, path):
        np.savez_compressed(path, **self.__dict__)

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls(**{k: f[k] for k in f.files})


def gen_frames(link: Link, n: int, snr_db: float, *stream: int, start: int = 0) -> FrameBatch:
    """Frames ``start .. start+n-1`` of the stream keyed by ``stream``.

    Only the arrays needed for training and scoring are kept, so memory is
    O(n P) rather than O(n N P).
    """
    cfg = link.cfg
    out = FrameBatch(
        x_real=np.empty((n, 2 * cfg.P)), d_real=np.empty((n, 2 * cfg.P)),
        w_real=np.empty((n, 2 * cfg.L)), h=np.empty((n, cfg.N), dtype=complex),
        ulus_bits=np.empty((n, 2 * cfg.P), dtype=np.int8),
        feedback_bits=np.empty((n, cfg.n_feedback_bits), dtype=np.int8))
    for j in range(n):
        f = gen_frame(link, snr_db, frame_rng(cfg.seed, *stream, start + j))
        out.x_real[j] = f.x_real
        out.d_real[j] = f.d_real
        out.w_real[j] = f.w_real
        out.h[j] = f.h.values
        out.ulus_bits[j] = f.ulus_bits
        out.feedback_bits[j] = f.feedback_bits
    return out


# --- scoring --------------------------------------------------------------

def eval_nmse(h_hat, h_real) -> tuple[float, int]:
    """Mean of per-sample ``||h_hat - h||^2 / ||h||^2``.

    Returns ``(nmse, skipped)`` where ``skipped`` counts zero-norm labels.
    """
    h_hat = np.atleast_2d(h_hat)
    h_real = np.atleast_2d(h_real)
    energy = np.sum(h_real ** 2, axis=1)
    ok = energy > 0
    if not ok.any():
        raise ValueError("all labels have zero norm")
    err = np.sum((h_hat - h_real) ** 2, axis=1)
    return float(np.mean(err[ok] / energy[ok])), int((~ok).sum())


def eval_ber(pairs, stop_errors: int = 1000, max_frames: int | None = None):
    """Accumulate bit errors over ``(decisions, truth)`` frames.

    Stops after the first frame at which ``stop_errors`` errors have been
    seen, or after ``max_frames`` frames.  Returns
    ``(ber, frames_used, errors)``.
    """
    errors = bits = frames = 0
    for decisions, truth in pairs:
        decisions = np.asarray(decisions)
        truth = np.asarray(truth)
        if decisions.shape != truth.shape:
            raise ValueError("decision and truth frames differ in shape")
        errors += int(np.count_nonzero(decisions != truth))
        bits += truth.size
        frames += 1
        if errors >= stop_errors or (max_frames is not None and frames >= max_frames):
            break
    if bits == 0:
        raise ValueError("no bits were processed")
    return errors / bits, frames, errors


@dataclass
class ResultRow:
    scheme: str
    snr_db: float
    ber_ulus: float
    ber_mfv: float
    nmse: float
    frames_used: int
    bit_errors_observed: int
    wall_clock_s: float
    stopped_by: str = field(default="errors", compare=False)

    def __post_init__(self):
        for name in ("ber_ulus", "ber_mfv"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                log.warning("%s %s=%g outside the expected [0, 0.5]",
                            self.scheme, name, v)

    def as_csv(self) -> list[str]:
        wc = "" if math.isnan(self.wall_clock_s) else f"{self.wall_clock_s:.4f}"
        return [self.scheme, f"{self.snr_db:g}", f"{self.ber_ulus:.6e}",
                f"{self.ber_mfv:.6e}", f"{self.nmse:.6e}", str(self.frames_used),
                str(self.bit_errors_observed), wc]


def write_csv(rows, path) -> None:
    buf = io.StringIO()
    buf.write(CSV_TAG + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_TAG:
        raise ValueError(f"{path}: missing results format tag")
    return list(csv.DictReader(lines[1:]))


# --- receivers ------------------------------------------------------------

def mfv_bits(w_real, cfg: SystemConfig) -> np.ndarray:
    """Hard MFV decisions from real-rail symbol estimates, as ``[y_real, y_imag, z]``."""
    y_r, y_i, z = qpsk_demodulate(real_to_complex(w_real), cfg)
    return np.concatenate([y_r, y_i, z], axis=-1)


def _ulus_bits(d_real) -> np.ndarray:
    return demodulate_bits(real_to_complex(d_real))


class ProposedReceiver:
    name = "proposed"

    def __init__(self, link: Link, detector: DetectionNetwork,
                 refiner: RefinementNetwork, beta: int = 8):
        self.link = link
        self.detector = detector
        self.refiner = refiner
        self.beta = beta

    def detect(self, x_real):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UntrainedNetworkWarning)
            out = detect_forward(self.detector, x_real)
        return out.w_hat, out.d_hat

    def reconstruct(self, mfv_bits):
        M = self.link.cfg.M
        H, degenerate = sca_biht_batch(mfv_bits[:, :M], mfv_bits[:, M:2 * M],
                                       mfv_bits[:, 2 * M:], self.link.phi, self.beta)
        h_hat = refine(H, self.refiner)
        h_hat[degenerate] = 0.0
        return h_hat


class BaselineReceiver:
    """Hard-decision cancellation plus SCA-BIHT with ``beta`` iterations.

    1-bit measurements carry no amplitude, so the unit-norm SCA-BIHT output
    is rescaled to the prior mean CSI energy ``K_hat / N`` (each non-zero
    entry has variance ``1/N``).
    """

    def __init__(self, link: Link, beta: int = 10, iters: int = 3):
        self.link = link
        self.beta = beta
        self.iters = iters
        self.name = f"baseline_b{beta}"

    def detect(self, x_real):
        return baseline_detect(x_real, self.link.cfg, self.iters)

    def reconstruct(self, mfv_bits):
        cfg = self.link.cfg
        M, N = cfg.M, cfg.N
        z = mfv_bits[:, 2 * M:]
        H, _ = sca_biht_batch(mfv_bits[:, :M], mfv_bits[:, M:2 * M], z,
                              self.link.phi, self.beta)
        k_hat = np.maximum(z.sum(axis=1), 1)
        return complex_to_real(H) * np.sqrt(k_hat / N)[:, None]


def evaluate_point(receiver, link: Link, snr_db: float, snr_index: int,
                   stop_errors: int = 1000, min_frames: int = 0,
                   max_frames: int = 200000, chunk: int = 200,
                   timing: bool = True) -> ResultRow:
    """BER of both streams and NMSE at one SNR under the error-count rule.

    Frames are processed in chunks, but the stopping frame is found exactly:
    the first frame at which both streams have accumulated ``stop_errors``
    errors (and at least ``min_frames`` frames were used).
    """
    cfg = link.cfg
    cum_u = cum_m = 0
    bits_u = bits_m = 0
    nmse_sum = 0.0
    frames = 0
    elapsed = 0.0
    stopped_by = "cap"
    while frames < max_frames:
        n = min(chunk, max_frames - frames)
        batch = gen_frames(link, n, snr_db, EVAL, snr_index, start=frames)
        t0 = time.perf_counter()
        w_hat, d_hat = receiver.detect(batch.x_real)
        mfv = mfv_bits(w_hat, cfg)
        h_hat = receiver.reconstruct(mfv)
        elapsed += time.perf_counter() - t0

        err_u = np.count_nonzero(_ulus_bits(d_hat) != batch.ulus_bits, axis=1)
        err_m = np.count_nonzero(mfv != batch.feedback_bits, axis=1)
        h_real = batch.h_real
        per_nmse = np.sum((h_hat - h_real) ** 2, axis=1) / np.sum(h_real ** 2, axis=1)

        cu = cum_u + np.cumsum(err_u)
        cm = cum_m + np.cumsum(err_m)
        idx = frames + np.arange(1, n + 1)
        done = np.flatnonzero((cu >= stop_errors) & (cm >= stop_errors) & (idx >= min_frames))
        take = done[0] + 1 if done.size else n
        cum_u = int(cu[take - 1])
        cum_m = int(cm[take - 1])
        bits_u += take * batch.ulus_bits.shape[1]
        bits_m += take * batch.feedback_bits.shape[1]
        nmse_sum += float(per_nmse[:take].sum())
        frames += take
        if done.size:
            stopped_by = "errors"
            break
    return ResultRow(
        scheme=receiver.name, snr_db=float(snr_db),
        ber_ulus=cum_u / bits_u, ber_mfv=cum_m / bits_m, nmse=nmse_sum / frames,
        frames_used=frames, bit_errors_observed=min(cum_u, cum_m),
        wall_clock_s=elapsed if timing else math.nan, stopped_by=stopped_by)


# --- training stages --------------------------------------------------------

def _metadata(exp: ExperimentConfig, stage: str, history, extra=None) -> dict:
    meta = {
        "package_version": __version__,
        "stage": stage,
        "config": exp.as_dict(),
        "derived": {"M": exp.system.M, "L": exp.system.L},
        "undocumented_defaults": {
            "bn_eps": BN_EPS, "bn_momentum": BN_MOMENTUM,
            "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
            "init": "glorot-uniform weights, zero biases, identity batch norm",
            "lrelu_slope": exp.train.slope,
            "det_batch_size": exp.train.det_batch_size,
            "rec_batch_size": exp.train.rec_batch_size,
            "training_snr": "noise-free",
        },
        "history": [list(h) for h in history],
    }
    if extra:
        meta.update(extra)
    return meta


def _write_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            writer.writerow([epoch, f"{tr:.8e}", f"{va:.8e}"])


_DET_STREAMS = (DET_TRAIN, DET_VAL, DET_TEST)
_REC_STREAMS = (REC_TRAIN, REC_VAL, REC_TEST)


def detection_datasets(link: Link, sizes, splits: int = 3):
    """Noise-free train/val/test frames for the detector (first ``splits``)."""
    return tuple(gen_frames(link, n, NOISE_FREE, s)
                 for n, s in list(zip(sizes, _DET_STREAMS))[:splits])


def train_detection_stage(exp: ExperimentConfig, link: Link | None = None,
                          data=None, save: bool = True):
    """Generate noise-free frames, train the detector, optionally save it."""
    link = link or Link.from_config(exp.system)
    tr, va = data[:2] if data is not None else detection_datasets(link, exp.train.det_sizes, 2)
    t = exp.train
    net, history = train_detector(
        tr.detection_triple(), va.detection_triple(), exp.system,
        alpha1=t.alpha1, epochs=t.epochs, lr=t.lr, batch_size=t.det_batch_size,
        rng=frame_rng(exp.system.seed, NET_INIT, 1), slope=t.slope)
    if save:
        path = exp.paths.resolve("detector")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, net.subnets(), {"phi": link.phi})
        path.with_suffix(".json").write_text(
            json.dumps(_metadata(exp, "detector", history), indent=2))
        _write_history(history, path.with_suffix(".loss.csv"))
    return net, history


def refiner_features(link: Link, detector: DetectionNetwork, frames: FrameBatch,
                     beta: int = 8, chunk: int = 2000):
    """Refiner inputs from detector-decoded bits, and the CSI labels."""
    if detector is None:
        raise MissingCheckpointError("the refiner is trained on a trained detector's output")
    recv = ProposedReceiver(link, detector, None, beta)
    mfv = np.concatenate([mfv_bits(recv.detect(frames.x_real[s:s + chunk])[0], link.cfg)
                          for s in range(0, len(frames), chunk)])
    M = link.cfg.M
    H, _ = sca_biht_batch(mfv[:, :M], mfv[:, M:2 * M], mfv[:, 2 * M:], link.phi, beta)
    return complex_to_real(H), frames.h_real


def reconstruction_datasets(link: Link, sizes, splits: int = 3):
    """Noise-free train/val/test frames for the refiner (first ``splits``)."""
    return tuple(gen_frames(link, n, NOISE_FREE, s)
                 for n, s in list(zip(sizes, _REC_STREAMS))[:splits])


def train_reconstruction_stage(exp: ExperimentConfig, detector: DetectionNetwork,
                               link: Link | None = None, data=None,
                               save: bool = True, alpha2: float | None = None):
    link = link or Link.from_config(exp.system)
    tr, va = data[:2] if data is not None else reconstruction_datasets(link, exp.train.rec_sizes, 2)
    beta = exp.eval.proposed_beta
    t = exp.train
    alpha2 = t.alpha2 if alpha2 is None else alpha2
    net, history = train_refiner(
        refiner_features(link, detector, tr, beta),
        refiner_features(link, detector, va, beta),
        exp.system.N, alpha2=alpha2, epochs=t.epochs, lr=t.lr,
        batch_size=t.rec_batch_size, rng=frame_rng(exp.system.seed, NET_INIT, 2),
        slope=t.slope)
    if save:
        path = exp.paths.resolve("refiner")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, net.subnets(), {"phi": link.phi})
        path.with_suffix(".json").write_text(json.dumps(
            _metadata(exp, "refiner", history, {"beta": beta, "alpha2": alpha2}),
            indent=2))
        _write_history(history, path.with_suffix(".loss.csv"))
    return net, history


def load_detector(exp: ExperimentConfig):
    """Load the detector checkpoint; returns ``(net, phi)``."""
    cfg = exp.system
    path = exp.paths.resolve("detector")
    if not path.is_file():
        raise MissingCheckpointError(f"detector checkpoint not found: {path}")
    expected = DetectionNetwork.zeros(cfg).expected_dims()
    nets, arrays = load_checkpoint(path, expected)
    return DetectionNetwork.from_subnets(nets, cfg.rho, cfg.E_u, cfg.L, cfg.P), arrays.get("phi")


def load_refiner(exp: ExperimentConfig):
    N = exp.system.N
    path = exp.paths.resolve("refiner")
    if not path.is_file():
        raise MissingCheckpointError(f"refiner checkpoint not found: {path}")
    nets, arrays = load_checkpoint(path, {"refiner": (2 * N, 4 * N, 2 * N)})
    return RefinementNetwork(nets["refiner"], trained=True), arrays.get("phi")


def build_receivers(exp: ExperimentConfig, link: Link, detector=None, refiner=None):
    receivers = []
    if "proposed" in exp.eval.schemes:
        receivers.append(ProposedReceiver(link, detector, refiner, exp.eval.proposed_beta))
    if "baseline" in exp.eval.schemes:
        receivers.extend(BaselineReceiver(link, b, exp.eval.baseline_iters)
                         for b in exp.eval.baseline_betas)
    return receivers


def run_experiment(exp: ExperimentConfig, detector=None, refiner=None,
                   link: Link | None = None, out=None) -> list[ResultRow]:
    """Evaluate every configured scheme at every SNR; optionally write CSV.

    When the proposed scheme is requested and no networks are passed, they
    are loaded from the configured checkpoint paths, and their stored
    measurement matrix must match the configuration bit for bit.
    """
    phi = None
    if "proposed" in exp.eval.schemes:
        if detector is None:
            detector, phi = load_detector(exp)
        if refiner is None:
            refiner, phi_r = load_refiner(exp)
            if phi is not None and phi_r is not None and not np.array_equal(phi, phi_r):
                raise ConfigMismatchError("detector and refiner were trained "
                                          "with different measurement matrices")
            phi = phi if phi is not None else phi_r
    if link is None:
        link = Link.from_config(exp.system)
    if phi is not None and not np.array_equal(phi, link.phi):
        raise ConfigMismatchError("checkpoint measurement matrix does not match "
                                  "the configured seed and dimensions")
    e = exp.eval
    rows = []
    for recv in build_receivers(exp, link, detector, refiner):
        for i, snr in enumerate(e.snr_db):
            row = evaluate_point(recv, link, snr, i, e.stop_errors, e.min_frames,
                                 e.max_frames, e.chunk, e.timing)
            log.info("%s snr=%g ber_ulus=%.3e ber_mfv=%.3e nmse=%.4f frames=%d",
                     row.scheme, snr, row.ber_ulus, row.ber_mfv, row.nmse,
                     row.frames_used)
            rows.append(row)
    if out is not None:
        write_csv(rows, out)
        Path(out).with_suffix(".json").write_text(json.dumps({
            "config": dump_config(exp),
            "stopped_by": [[r.scheme, r.snr_db, r.stopped_by] for r in rows],
        }, indent=2))
    return rows


def time_reconstruction(receiver, mfv_bits: np.ndarray, repeats: int = 1) -> float:
    """Wall-clock seconds to reconstruct each frame one at a time."""
    t0 = time.perf_counter()
    for _ in range(repeats):
        for row in mfv_bits:
            receiver.reconstruct(row[None, :])
    return time.perf_counter() - t0


SWEEP_PARAMS = ("rho", "c", "alpha2")


def sweep(exp: ExperimentConfig, param: str, values, out=None,
          save: bool = False) -> list[ResultRow]:
    """Retrain and evaluate over a grid of ``rho``, ``c`` or ``alpha2``.

    For ``rho`` and ``c`` both stages are retrained per value; for
    ``alpha2`` the detector is trained once.  The scheme column carries the
    grid value, e.g. ``proposed[rho=0.05]``.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("empty sweep grid")
    rows = []
    detector = None
    for v in values:
        out_dir = str(Path(exp.paths.out_dir) / f"sweep_{param}_{v:g}")
        sub = exp.replace(paths={"out_dir": out_dir})
        if param in ("rho", "c"):
            sub = sub.replace(system={param: v})
        link = Link.from_config(sub.system)
        need_nets = "proposed" in sub.eval.schemes
        refiner = None
        if need_nets:
            if detector is None or param != "alpha2":
                detector, _ = train_detection_stage(sub, link, save=save)
            refiner, _ = train_reconstruction_stage(
                sub, detector, link, save=save,
                alpha2=v if param == "alpha2" else None)
        for row in run_experiment(sub, detector, refiner, link):
            row.scheme = f"{row.scheme}[{param}={v:g}]"
            rows.append(row)
    if out is not None:
        write_csv(rows, out)
    return rows
