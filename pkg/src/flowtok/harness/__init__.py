"""Experiment harness: configuration, checkpoints, metrics, CLI, ablations."""

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .metrics import MetricsLogger, read_metrics

__all__ = [
    "CheckpointBundle", "load_checkpoint", "save_checkpoint",
    "ConfigError", "ExperimentConfig", "MetricsLogger", "read_metrics",
]
