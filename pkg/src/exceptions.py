"""
Exception hierarchy for the CondenseNetV2 toolkit.

Every error raised on purpose by the package derives from CondenseNetError so the
CLI can map failures onto exit codes without string matching.
"""

from typing import Optional, Sequence, Union


class CondenseNetError(Exception):
    """Base class for all package errors."""


class TensorShapeError(CondenseNetError, ValueError):
    """Raised when tensor dimensions do not line up."""

    def __init__(self, op: str, expected: str, actual: Optional[Union[Sequence[int], str]] = None):
        self.op = op
        self.expected = expected
        self.actual = actual
        message = f"{op}: expected {expected}"
        if actual is not None:
            message += f", got {tuple(actual) if not isinstance(actual, str) else actual}"
        super().__init__(message)


class StageOverflowError(CondenseNetError, RuntimeError):
    """Raised when a prune stage is requested after the last sparsification stage."""


class ScheduleError(CondenseNetError, ValueError):
    """Raised when an epoch budget cannot host the requested number of stages."""


class NotReadyError(CondenseNetError, RuntimeError):
    """Raised when compiling a layer that has not finished its sparsification."""


class ConfigError(CondenseNetError, ValueError):
    """Raised for invalid or unparseable configuration."""


class DatasetFormatError(CondenseNetError, ValueError):
    """Raised when a dataset file does not match its record layout."""


class TrainingError(CondenseNetError, RuntimeError):
    """Raised when training cannot continue (non-finite gradients)."""


class CheckpointFormatError(CondenseNetError, ValueError):
    """Raised when a checkpoint or plan container is malformed."""
