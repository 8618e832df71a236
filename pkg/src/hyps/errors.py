"""Exception types shared across the package.

The CLI maps these onto its exit codes, so keep the hierarchy flat.
"""


class HypsError(Exception):
    """Base class for all package errors."""


class ShapeError(HypsError, ValueError):
    pass


class ConfigError(HypsError, ValueError):
    pass


class NumericError(HypsError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(HypsError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(HypsError, ValueError):
    pass


class InsufficientDataError(DataError):
    """A class has fewer members than the number of folds."""


class UndefinedMetricError(HypsError, ValueError):
    pass


class UsageError(HypsError, ValueError):
    pass
