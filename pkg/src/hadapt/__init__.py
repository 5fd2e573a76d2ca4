"""Desk-scale laboratory for elementwise adapter tuning of a small encoder.

The package is self-contained: its own autodiff tape, its own seeded
random streams, synthetic tasks with exact labeling oracles, a two-stage
tuning pipeline, and the measurement tools used to study it.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    ConvergenceError,
    DataError,
    HadaptError,
    NumericError,
    ShapeError,
    TapeError,
    TrainingError,
    UsageError,
)
from .model import ModelConfig, ParameterStore, build_model, build_task_model
from .rng import Rng, derive_seed
from .tensor import Tape, Tensor, spectral_norm
from .training import HyperParams, TuneSettings, TuningRegime

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "HadaptError",
    "HyperParams",
    "ModelConfig",
    "NumericError",
    "ParameterStore",
    "Rng",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainingError",
    "TuneSettings",
    "TuningRegime",
    "UsageError",
    "build_model",
    "build_task_model",
    "derive_seed",
    "spectral_norm",
    "__version__",
]
