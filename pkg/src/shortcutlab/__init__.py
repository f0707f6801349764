"""Synthetic multi-shortcut benchmarks and shortcut-mitigation trainers."""

from .errors import (
    CompatibilityError,
    ConfigError,
    DataError,
    FormatError,
    PreconditionError,
    ShortcutLabError,
    TrainingError,
)
from .synth import CueSpec, DatasetConfig, GroupKey, generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError", "ConfigError", "DataError", "FormatError", "PreconditionError",
    "ShortcutLabError", "TrainingError", "CueSpec", "DatasetConfig", "GroupKey",
    "generate_dataset", "read_dataset", "write_dataset",
]
