"""Exception types shared across the package."""


class NsdeError(Exception):
    """Base class for package errors."""


class DimensionError(NsdeError, ValueError):
    """Array shapes do not fit together."""


class NumericalError(NsdeError, ArithmeticError):
    """A computation produced non-finite or invalid values."""


class ConfigError(NsdeError, ValueError):
    """Invalid user configuration or input file."""
