"""Prompt-regularized fine-tuning on a synthetic contextual-bias task."""

from .datagen import BiasSpec, Dataset, generate
from .harness import ExperimentConfig, Method, MetricsRow, harmonic_mean, run_experiment, sweep
from .losses import LossBreakdown, LossMode, proreg_loss, proreg_weight
from .model import LinearModel, TrainConfig, train
from .oracle import ZeroShotOracle, build_oracle
from .q2s import convert_record, to_statement

__version__ = "0.1.0"

__all__ = [
    "BiasSpec", "Dataset", "generate", "ExperimentConfig", "Method", "MetricsRow",
    "harmonic_mean", "run_experiment", "sweep", "LossBreakdown", "LossMode",
    "proreg_loss", "proreg_weight", "LinearModel", "TrainConfig", "train",
    "ZeroShotOracle", "build_oracle", "convert_record", "to_statement",
]
