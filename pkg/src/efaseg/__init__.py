"""Embedding-free attention segmentation with inference spatial reduction."""

from .errors import (ConfigError, DimensionError, NumericError, ScheduleParseError,
                     UsageError)
from .numerics import Tensor, backward, mac_counter, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "NumericError", "ScheduleParseError", "UsageError",
    "Tensor", "backward", "mac_counter", "no_grad",
    "__version__",
]
