"""Exception hierarchy shared by every module."""


class CupiError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CupiError, ValueError):
    pass


class FormatError(CupiError, ValueError):
    pass


class ShapeError(CupiError, ValueError):
    pass


class BoundsError(CupiError, IndexError):
    pass


class StateError(CupiError, RuntimeError):
    pass


class NumericError(CupiError, ArithmeticError):
    pass


class TrainingDiverged(NumericError):
    """Raised when a training step produces a non-finite loss.

    ``last_good`` carries the model bundle as it was at the end of the last
    completed epoch (or at initialization).
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
