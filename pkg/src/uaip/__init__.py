"""Uncertainty-aware sequential query selection.

The package trains a querier/classifier pair that asks informative yes-no
questions one at a time, masks questions whose answers look unreliable, and
explains each prediction by the exact query-answer trace that produced it.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataError, GraphError,
                     NumericsError, UaipError, UndefinedMetricError)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "GraphError",
    "NumericsError",
    "UaipError",
    "UndefinedMetricError",
    "__version__",
]
