"""Exception types shared across the package.

Every error raised by library code derives from HadaptError so callers
(including the command line front end) can map failures onto exit codes
without matching on message strings.
"""

from __future__ import annotations


class HadaptError(Exception):
    """Base class for all package errors."""


class ShapeError(HadaptError):
    """An operand had an incompatible shape, rank, or dtype."""


class TapeError(HadaptError):
    """Misuse of the autodiff tape (non-scalar loss, reuse after free, ...)."""


class NumericError(HadaptError):
    """A NaN or Inf surfaced where finite values are required."""


class DataError(HadaptError):
    """Invalid dataset content: bad token ids, labels, or file contents."""


class ConfigError(HadaptError):
    """Invalid or inconsistent configuration values."""


class UsageError(HadaptError):
    """Command line invocation error (unknown flags, missing arguments)."""


class CheckpointError(HadaptError):
    """Checkpoint directory is missing, malformed, or fails validation."""


class TrainingError(HadaptError):
    """Invalid training setup, such as stepping a parameter with no gradient."""


class ConvergenceError(NumericError):
    """An iterative method hit its iteration cap before meeting tolerance.

    Carries the last two iterates so callers can inspect how far apart
    they were.
    """

    def __init__(self, message: str, last_two: tuple | None = None):
        super().__init__(message)
        self.last_two = last_two
