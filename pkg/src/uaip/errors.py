"""Shared exception types.

The CLI maps :class:`ConfigError` (and argparse failures) to exit code 2 and
every other :class:`UaipError` or unexpected exception to exit code 3.
"""


class UaipError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UaipError):
    """Invalid configuration, arguments, or parameter combination."""


class DataError(UaipError):
    """Malformed dataset, probability file, or log file."""


class GraphError(UaipError):
    """Misuse of the computation graph: bad shapes, non-scalar loss,
    selection over an empty candidate set."""


class NumericsError(UaipError):
    """NaN or Inf encountered where finite values are required."""


class UndefinedMetricError(UaipError):
    """Metric undefined for the given inputs (e.g. AUC with one class)."""


class CheckpointError(UaipError):
    """Unreadable, truncated, or incompatible checkpoint file."""
