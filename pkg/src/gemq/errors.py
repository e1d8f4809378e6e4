"""Exception types shared across the package."""


class GemqError(Exception):
    """Base class for all errors raised by gemq."""


class ShapeError(GemqError, ValueError):
    """Operand shapes are incompatible."""


class FormatError(GemqError):
    """A serialized artifact is malformed, truncated or of an unknown version."""


class ConfigMismatchError(GemqError):
    """A serialized artifact was produced for a different model configuration."""


class ConditioningError(GemqError):
    """The damped Hessian is not positive definite."""


class InfeasibleError(GemqError):
    """No bit allocation satisfies the budget and the layer constraints."""

    def __init__(self, message, constraint):
        super().__init__(message)
        self.constraint = constraint
