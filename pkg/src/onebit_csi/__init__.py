"""Learned detection and reconstruction for 1-bit compressed-sensing CSI
feedback superimposed on uplink data."""

__version__ = "0.1.0"

from .config import ExperimentConfig, EvalConfig, PathConfig, TrainConfig, load_config, parse_config
from .detector import DetectionNetwork, baseline_detect, detect_forward, train_detector
from .harness import Link, eval_ber, eval_nmse, gen_frame, gen_frames, run_experiment
from .onebit_codec import compress_1bit, qpsk_demodulate, qpsk_modulate
from .reconstruction import RefinementNetwork, refine, sca_biht, train_refiner
from .signal_model import ConfigError, SystemConfig

__all__ = [
    "ConfigError", "DetectionNetwork", "EvalConfig", "ExperimentConfig", "Link",
    "PathConfig", "RefinementNetwork", "SystemConfig", "TrainConfig",
    "baseline_detect", "compress_1bit", "detect_forward", "eval_ber", "eval_nmse",
    "gen_frame", "gen_frames", "load_config", "parse_config", "qpsk_demodulate",
    "qpsk_modulate", "refine", "run_experiment", "sca_biht", "train_detector",
    "train_refiner",
]
