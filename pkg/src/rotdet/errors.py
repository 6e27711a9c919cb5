"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not fit together."""


class ConfigError(ValueError):
    """A configuration value is outside its allowed domain."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InfeasibleError(ValueError):
    """Fewer queries than ground-truth objects; no injective assignment exists."""


class UsageError(RuntimeError):
    """An API was called out of order or with inconsistent arguments."""


class StateError(RuntimeError):
    """Matching state does not match the incoming stage."""
