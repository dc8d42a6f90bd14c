"""Exception hierarchy shared by all raqr modules."""


class RaqrError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RaqrError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(RaqrError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(RaqrError, ValueError):
    """A configuration object violates its invariants."""


class DivergenceError(RaqrError, ArithmeticError):
    """An iterative solver produced non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class CheckpointError(RaqrError):
    """A dataset or checkpoint file is missing, malformed, or incompatible."""
