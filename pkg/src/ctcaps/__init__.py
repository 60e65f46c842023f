"""Capsule-network CT classification: numerics engine, models, data, metrics and Grad-CAM."""

from . import capsnet, data, explain, metrics, model, numerics
from .errors import (
    ConfigError,
    CtCapsError,
    DataError,
    DimensionError,
    EmptyVolumeError,
    FormatError,
    NonFiniteError,
    OptimizerError,
    StateError,
    StratificationError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CtCapsError",
    "DataError",
    "DimensionError",
    "EmptyVolumeError",
    "FormatError",
    "NonFiniteError",
    "OptimizerError",
    "StateError",
    "StratificationError",
    "UsageError",
    "capsnet",
    "data",
    "explain",
    "metrics",
    "model",
    "numerics",
]
