"""Command-line entry point.

::

    python -m onebit_csi train-det --config scaled.cfg --out runs/scaled
    python -m onebit_csi train-rec --config scaled.cfg --out runs/scaled
    python -m onebit_csi eval      --config scaled.cfg --run-dir runs/scaled --out results.csv
    python -m onebit_csi baseline  --config scaled.cfg --out baseline.csv
    python -m onebit_csi sweep     --config scaled.cfg --param rho --values 0.05,0.1,0.15
    python -m onebit_csi gen-data  --config scaled.cfg --out data/

Exit status: 0 success, 1 usage error, 2 data error (missing or
mismatched files, invalid configuration), 3 numeric failure in training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, load_config
from .detector import NumericFailure
from .nn_core import CheckpointError
from .signal_model import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output directory (training, data) or CSV path (evaluation)")
    common.add_argument("--run-dir", help="checkpoint directory, overriding [paths] out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="onebit-csi", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write noise-free datasets as .npz")
    sub.add_parser("train-det", parents=[common], help="train the detection network")
    sub.add_parser("train-rec", parents=[common], help="train the refinement network")
    sub.add_parser("eval", parents=[common], help="evaluate the configured schemes")
    sub.add_parser("baseline", parents=[common], help="evaluate the non-learned baseline only")
    sw = sub.add_parser("sweep", parents=[common], help="retrain and evaluate over a grid")
    sw.add_argument("--param", required=True, choices=harness.SWEEP_PARAMS)
    sw.add_argument("--values", required=True, help="comma-separated grid values")
    return parser


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp = exp.replace(system={"seed": args.seed})
    if args.run_dir:
        exp = exp.replace(paths={"out_dir": args.run_dir})
    return exp


def _with_out_dir(exp, out):
    return exp.replace(paths={"out_dir": out}) if out else exp


def _run(args) -> None:
    exp = _experiment(args)
    cmd = args.command
    if cmd == "gen-data":
        out = Path(args.out or exp.paths.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        link = harness.Link.from_config(exp.system)
        for prefix, sets in (("det", harness.detection_datasets(link, exp.train.det_sizes)),
                             ("rec", harness.reconstruction_datasets(link, exp.train.rec_sizes))):
            for split, batch in zip(("train", "val", "test"), sets):
                batch.save(out / f"{prefix}_{split}.npz")
        print(f"datasets written to {out}")
    elif cmd == "train-det":
        exp = _with_out_dir(exp, args.out)
        harness.train_detection_stage(exp)
        print(f"detector saved to {exp.paths.resolve('detector')}")
    elif cmd == "train-rec":
        exp = _with_out_dir(exp, args.out)
        detector, phi = harness.load_detector(exp)
        link = harness.Link.from_config(exp.system, phi)
        harness.train_reconstruction_stage(exp, detector, link)
        print(f"refiner saved to {exp.paths.resolve('refiner')}")
    elif cmd in ("eval", "baseline"):
        if cmd == "baseline":
            exp = exp.replace(eval={"schemes": ("baseline",)})
        out = args.out or exp.paths.resolve("results")
        harness.run_experiment(exp, out=out)
        print(f"results written to {out}")
    elif cmd == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"--values: {exc}") from exc
        out = args.out or Path(exp.paths.out_dir) / f"sweep_{args.param}.csv"
        harness.sweep(exp, args.param, values, out=out)
        print(f"results written to {out}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
