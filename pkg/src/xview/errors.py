"""Exception types shared across the package."""


class XViewError(Exception):
    """Base class for all package errors."""


class ShapeError(XViewError, ValueError):
    pass


class NumericError(XViewError, ArithmeticError):
    pass


class StateError(XViewError, RuntimeError):
    pass


class ConfigError(XViewError, ValueError):
    pass


class FormatError(XViewError, ValueError):
    pass


class UndefinedMetric(XViewError):
    """Raised when a metric has no value for the given operands (e.g. empty masks)."""


class GenerationError(XViewError, RuntimeError):
    pass
