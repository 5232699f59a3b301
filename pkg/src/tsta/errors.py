"""Exception types raised across the package."""


class TSTAError(Exception):
    """Base class for all package errors."""


class ValidationError(TSTAError, ValueError):
    """Invalid argument or configuration."""


class DivisibilityError(ValidationError):
    pass


class ZeroSizeError(ValidationError):
    pass


class OutOfRangeError(ValidationError, IndexError):
    pass


class EvenWindowError(ValidationError):
    pass


class ZeroWindowError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class MaskMismatchError(ValidationError):
    pass


class EmptyRowError(ValidationError):
    """A query row admits no key, so its softmax is undefined."""


class DivergenceError(TSTAError, ArithmeticError):
    """Training loss became non-finite."""


class CorrectnessGateError(TSTAError):
    """Sparse output disagreed with the dense oracle before timing."""
