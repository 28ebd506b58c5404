import json
import math

import numpy as np
import pytest

from onebit_csi import harness as H
from onebit_csi.config import ExperimentConfig
from onebit_csi.nn_core import ConfigMismatchError
from onebit_csi.signal_model import SystemConfig, frame_rng


def small_exp(tmp_path, **eval_kw):
    ev = dict(snr_db=(0.0, 8.0), stop_errors=200, min_frames=20, max_frames=400,
              chunk=50, timing=False)
    ev.update(eval_kw)
    return ExperimentConfig().replace(
        system=dict(N=8, P=32, c=1.0, K=2, rho=0.1, seed=5),
        train=dict(epochs=2, det_sizes=(200, 100, 100), rec_sizes=(200, 100, 100),
                   det_batch_size=50, rec_batch_size=50),
        eval=ev, paths=dict(out_dir=str(tmp_path)))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    exp = small_exp(tmp)
    link = H.Link.from_config(exp.system)
    det, det_hist = H.train_detection_stage(exp, link)
    ref, ref_hist = H.train_reconstruction_stage(exp, det, link)
    return exp, link, det, ref


def test_noise_free_frame(tiny_cfg):
    link = H.Link.from_config(tiny_cfg)
    f = H.gen_frame(link, math.inf, frame_rng(0, 1))
    assert f.noise_variance == 0
    np.testing.assert_allclose(f.x_hat, f.x, rtol=0, atol=1e-12 * np.abs(f.x).max())
    assert f.feedback_bits.size == tiny_cfg.n_feedback_bits
    assert f.w.size == tiny_cfg.L and f.d.size == tiny_cfg.P


def test_frame_is_reproducible(tiny_cfg):
    link = H.Link.from_config(tiny_cfg)
    a = H.gen_frame(link, 5.0, frame_rng(1, 2, 3))
    b = H.gen_frame(link, 5.0, frame_rng(1, 2, 3))
    for name in ("g", "ulus_bits", "feedback_bits", "x", "R", "x_hat"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.array_equal(a.h.values, b.h.values)


def test_frame_power():
    cfg = SystemConfig(N=64, P=512, c=2.0, K=8, rho=0.1)
    link = H.Link.from_config(cfg)
    energy = np.mean([np.sum(np.abs(H.gen_frame(link, math.inf, frame_rng(0, 1, i)).x) ** 2)
                      for i in range(10_000)]) / cfg.P
    assert abs(energy - cfg.E_u) < 0.05 * cfg.E_u


def test_batch_matches_single_frames(tiny_cfg):
    link = H.Link.from_config(tiny_cfg)
    batch = H.gen_frames(link, 4, 3.0, 8, start=10)
    f = H.gen_frame(link, 3.0, frame_rng(tiny_cfg.seed, 8, 12))
    assert np.array_equal(batch.x_real[2], f.x_real)
    assert np.array_equal(batch.h[2], f.h.values)


def test_eval_ber_examples():
    truth = np.zeros(100, dtype=np.int8)
    ber, frames, errors = H.eval_ber(((truth, truth) for _ in range(50)), max_frames=20)
    assert (ber, frames, errors) == (0.0, 20, 0)

    ber, frames, errors = H.eval_ber(((1 - truth, truth) for _ in range(50)))
    assert ber == 1.0 and frames == math.ceil(1000 / 100) and errors == 1000

    rng = np.random.default_rng(0)
    pairs = ((rng.integers(0, 2, 1000), rng.integers(0, 2, 1000)) for _ in range(1000))
    ber, frames, _ = H.eval_ber(pairs, stop_errors=10 ** 9)
    assert frames == 1000 and abs(ber - 0.5) < 0.01

    with pytest.raises(ValueError):
        H.eval_ber(iter(()))
    with pytest.raises(ValueError):
        H.eval_ber([(np.zeros(3), np.zeros(4))])


def test_eval_nmse_examples(rng):
    h = rng.standard_normal((10, 8))
    assert H.eval_nmse(h, h) == (0.0, 0)
    assert H.eval_nmse(np.zeros_like(h), h)[0] == pytest.approx(1.0)
    assert H.eval_nmse(2 * h, h)[0] == pytest.approx(1.0)
    h[3] = 0
    assert H.eval_nmse(np.zeros_like(h), h) == (pytest.approx(1.0), 1)
    with pytest.raises(ValueError):
        H.eval_nmse(h[3:4], h[3:4])


def test_csv_format(tmp_path):
    rows = [H.ResultRow("proposed", 10.0, 1e-3, 2e-2, 0.1, 1200, 1001, 0.5),
            H.ResultRow("baseline_b10", 10.0, 0.01, 0.05, 0.2, 300, 1000, float("nan"))]
    path = tmp_path / "r.csv"
    H.write_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == H.CSV_TAG
    assert lines[1] == ",".join(H.CSV_COLUMNS)
    back = H.read_csv(path)
    assert back[0]["scheme"] == "proposed" and float(back[0]["ber_ulus"]) == 1e-3
    assert back[1]["wall_clock_s"] == ""
    (tmp_path / "bad.csv").write_text("scheme\n")
    with pytest.raises(ValueError):
        H.read_csv(tmp_path / "bad.csv")


def test_result_row_flags_out_of_range(caplog):
    H.ResultRow("x", 0.0, 0.7, 0.1, 0.1, 1, 1, 0.0)
    assert "outside" in caplog.text


def test_stopping_frame_is_independent_of_chunking(trained):
    exp, link, det, ref = trained
    recv = H.BaselineReceiver(link, 10)
    rows = [H.evaluate_point(recv, link, 4.0, 0, stop_errors=150, min_frames=5,
                             max_frames=1000, chunk=c, timing=False) for c in (1, 7, 200)]
    key = [(r.ber_ulus, r.ber_mfv, r.frames_used, r.bit_errors_observed) for r in rows]
    assert key[0] == key[1] == key[2]
    assert rows[0].nmse == pytest.approx(rows[1].nmse, rel=1e-12) == rows[2].nmse
    assert rows[0].stopped_by == "errors" and rows[0].bit_errors_observed >= 150


def test_frame_cap(trained):
    exp, link, det, ref = trained
    row = H.evaluate_point(H.BaselineReceiver(link, 10), link, 30.0, 0,
                           stop_errors=10 ** 9, max_frames=60, chunk=25, timing=False)
    assert row.frames_used == 60 and row.stopped_by == "cap"


def test_checkpoints_and_metadata(trained):
    exp, link, det, ref = trained
    meta = json.loads(exp.paths.resolve("detector").with_suffix(".json").read_text())
    assert meta["undocumented_defaults"]["bn_eps"] == 1e-5
    assert meta["derived"] == {"M": 8, "L": 12}
    assert meta["config"]["train"]["epochs"] == 2
    loss = exp.paths.resolve("refiner").with_suffix(".loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,train_loss,val_loss" and len(loss) == 4
    det2, phi = H.load_detector(exp)
    assert np.array_equal(phi, link.phi)
    x = H.gen_frames(link, 3, 10.0, 50).x_real
    from onebit_csi.detector import detect_forward
    assert np.array_equal(detect_forward(det2, x).w_hat, detect_forward(det, x).w_hat)


def test_run_experiment_is_reproducible(trained, tmp_path):
    exp, link, det, ref = trained
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    rows = H.run_experiment(exp, out=a)
    H.run_experiment(exp, out=b)
    assert a.read_bytes() == b.read_bytes()
    assert [r.scheme for r in rows] == ["proposed"] * 2 + ["baseline_b10"] * 2 + ["baseline_b100"] * 2
    for r in rows:
        assert 0 <= r.ber_ulus <= 0.5 and r.nmse >= 0 and r.frames_used >= 20
    assert json.loads(a.with_suffix(".json").read_text())["stopped_by"][0][0] == "proposed"


def test_run_experiment_rejects_mismatched_checkpoint(trained):
    exp, link, det, ref = trained
    with pytest.raises(ConfigMismatchError):
        H.run_experiment(exp.replace(system={"seed": 6}))
    with pytest.raises(ConfigMismatchError):
        H.run_experiment(exp.replace(system={"P": 64}))


def test_missing_checkpoints(tmp_path):
    exp = small_exp(tmp_path / "empty")
    with pytest.raises(H.MissingCheckpointError, match="detector.ckpt"):
        H.run_experiment(exp)
    with pytest.raises(H.MissingCheckpointError):
        H.refiner_features(H.Link.from_config(exp.system), None,
                           H.gen_frames(H.Link.from_config(exp.system), 2, math.inf, 1))
    # the baseline needs no checkpoints
    rows = H.run_experiment(exp.replace(eval={"schemes": ("baseline",)}))
    assert len(rows) == 4


def test_alpha2_sweep(trained, tmp_path):
    exp, link, det, ref = trained
    exp = exp.replace(eval={"snr_db": (8.0,), "schemes": ("proposed",)},
                      paths={"out_dir": str(tmp_path)})
    rows = H.sweep(exp, "alpha2", [1e-4, 1e-6], out=tmp_path / "s.csv")
    assert [r.scheme for r in rows] == ["proposed[alpha2=0.0001]", "proposed[alpha2=1e-06]"]
    with pytest.raises(ValueError):
        H.sweep(exp, "K", [1])


def test_time_reconstruction(trained):
    exp, link, det, ref = trained
    b = H.gen_frames(link, 5, math.inf, 60)
    bits = b.feedback_bits
    assert H.time_reconstruction(H.BaselineReceiver(link, 10), bits) > 0
