"""U-shaped federated split learning with data-level DP and smashed-data k-anonymity."""
from .errors import (
    CacheError,
    ConfigError,
    DataFormatError,
    LabelError,
    OutputError,
    PrivacyError,
    ShapeError,
    SplitGuardError,
    TrainingError,
)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CacheError",
    "ConfigError",
    "DataFormatError",
    "LabelError",
    "OutputError",
    "PrivacyError",
    "ShapeError",
    "SplitGuardError",
    "TrainingError",
]
