"""Exception hierarchy shared across the package."""


class TeddnError(Exception):
    pass


class DimensionError(TeddnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TeddnError, ValueError):
    """A precondition on an argument was violated."""


class ConfigError(TeddnError, ValueError):
    """Invalid configuration value or key."""


class BoundsError(TeddnError, IndexError):
    pass


class DataFormatError(TeddnError, ValueError):
    """Input file could not be parsed or has an unexpected size."""


class NumericalError(TeddnError, FloatingPointError):
    """A non-finite value showed up during training."""
