"""
Exception hierarchy shared by every module of the attribution toolkit.

Each class also derives from the builtin exception a caller would naturally
expect (ValueError, ArithmeticError, ...), so generic handlers keep working.
"""

from typing import Optional


class MilCigError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(MilCigError, ValueError):
    """A numeric parameter is outside its allowed range."""


class InputShapeError(MilCigError, ValueError):
    """An input tensor does not have the shape the function declares."""


class ContractError(MilCigError, ValueError):
    """A caller broke an operation's precondition."""


class EmptyBagError(ParameterError):
    """A bag (or requested baseline) has no instances."""


class DatasetError(MilCigError, ValueError):
    """A dataset is empty or internally inconsistent."""


class PoolError(MilCigError, ValueError):
    """A reference pool cannot be built or sampled."""


class FormatError(MilCigError, ValueError):
    """A binary file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """The trailing CRC32 of a binary file does not match its contents."""


class ConvergenceError(MilCigError, ArithmeticError):
    """An iterative method did not converge; carries its last estimate."""

    def __init__(self, message: str, last_estimate: float):
        super().__init__(f"{message} (last estimate {last_estimate!r})")
        self.last_estimate = last_estimate


class NumericError(MilCigError, ArithmeticError):
    """A non-finite value appeared during attribution."""

    def __init__(self, message: str, alpha: Optional[float] = None):
        if alpha is not None:
            message = f"{message} (alpha={alpha!r})"
        super().__init__(message)
        self.alpha = alpha


class EvaluationError(MilCigError, RuntimeError):
    """The evaluation protocol cannot run or a slide evaluation failed."""


class ConfigError(MilCigError, ValueError):
    """A run configuration value is invalid; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class StorageError(MilCigError, ValueError):
    """An artifact name is invalid or escapes the output directory."""
