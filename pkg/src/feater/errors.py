"""Exception hierarchy shared by every feater module."""


class FeaterError(Exception):
    """Base class for all library errors."""


class DimensionError(FeaterError, ValueError):
    """Operand shapes do not conform."""


class ParameterError(FeaterError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigurationError(FeaterError, ValueError):
    """A configuration object is inconsistent."""


class NumericError(FeaterError, ArithmeticError):
    """NaN or Inf appeared where finite values are required."""


class CountingStateError(FeaterError, RuntimeError):
    """MAC counts were requested from a pass that was not instrumented."""
