"""Experiment configuration read from ``key = value`` files with sections.

Example::

    [system]
    N = 32
    P = 128
    c = 2.0
    K = 4
    rho = 0.10
    seed = 7

    [train]
    epochs = 20
    det_sizes = 10000, 2000, 2000

    [eval]
    snr_db = 0, 4, 8, 12, 16
    schemes = proposed, baseline

Unknown sections or keys are rejected.  Relative paths in ``[paths]`` are
resolved against ``out_dir``.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .signal_model import ConfigError, SystemConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    det_batch_size: int = 200
    rec_batch_size: int = 200
    alpha1: float = 1e-6
    alpha2: float = 1e-5
    slope: float = 0.01
    det_sizes: tuple = (60000, 20000, 20000)
    rec_sizes: tuple = (45000, 15000, 15000)


@dataclass(frozen=True)
class EvalConfig:
    snr_db: tuple = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0)
    schemes: tuple = ("proposed", "baseline")
    proposed_beta: int = 8
    baseline_betas: tuple = (10, 100)
    baseline_iters: int = 3
    stop_errors: int = 1000
    min_frames: int = 1000
    max_frames: int = 200000
    chunk: int = 200
    timing: bool = True


@dataclass(frozen=True)
class PathConfig:
    out_dir: str = "runs"
    detector: str = "detector.ckpt"
    refiner: str = "refiner.ckpt"
    results: str = "results.csv"

    def resolve(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.out_dir) / p


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def __post_init__(self):
        if not self.eval.snr_db:
            raise ConfigError("snr_db must list at least one value")
        for sizes in (self.train.det_sizes, self.train.rec_sizes):
            if len(sizes) != 3 or min(sizes) <= 0:
                raise ConfigError("dataset sizes must be three positive integers")
        if min(self.train.det_batch_size, self.train.rec_batch_size) < 2:
            raise ConfigError("batch sizes must be at least 2 for batch statistics")
        if self.train.epochs < 0 or self.train.lr < 0:
            raise ConfigError("epochs and lr must be non-negative")
        bad = set(self.eval.schemes) - {"proposed", "baseline"}
        if bad:
            raise ConfigError(f"unknown schemes {sorted(bad)}")

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with fields overridden, e.g. ``replace(system={"rho": 0.05})``."""
        kw = {}
        for name, changes in sections.items():
            kw[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"system": SystemConfig, "train": TrainConfig,
             "eval": EvalConfig, "paths": PathConfig}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(float(s)) if kind is int else kind(s) for s in items)
    if isinstance(default, int):
        return int(float(raw))
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {}
    for name in parser.sections():
        cls = _SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"unknown section [{name}]")
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                values[key] = _parse_value(raw, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
        sections[name] = cls(**values)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
