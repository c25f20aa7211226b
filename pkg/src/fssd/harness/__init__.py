"""Synthetic data, training, checkpoints, evaluation, ablations and the CLI."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_state, save_checkpoint
from .config import DataConfig, EvalConfig, ExperimentConfig, TrainConfig, load_config, save_config
from .evaluate import detect, evaluate
from .shapeworld import Dataset, ShapeWorldSpec, generate_dataset, read_dataset, write_dataset
from .train import TrainingDiverged, train

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "DataConfig",
    "Dataset",
    "EvalConfig",
    "ExperimentConfig",
    "ShapeWorldSpec",
    "TrainConfig",
    "TrainingDiverged",
    "detect",
    "evaluate",
    "generate_dataset",
    "load_checkpoint",
    "load_config",
    "load_state",
    "read_dataset",
    "save_checkpoint",
    "save_config",
    "train",
    "write_dataset",
]
