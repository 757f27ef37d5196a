"""Exception hierarchy shared by all anomflow modules."""


class AnomflowError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AnomflowError, ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class ConfigError(AnomflowError, ValueError):
    """A spec/config object or config file is invalid."""


class InputError(AnomflowError, ValueError):
    """Runtime input violates a precondition (too small, empty, ...)."""


class FormatError(AnomflowError, ValueError):
    """A file does not conform to its on-disk format."""


class LayoutError(AnomflowError, ValueError):
    """A dataset directory tree does not follow the expected layout."""


class NumericError(AnomflowError, ArithmeticError):
    """A computation produced non-finite values (training divergence)."""
