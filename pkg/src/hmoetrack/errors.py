"""Exception types shared across the package."""


class HmoeTrackError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HmoeTrackError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(HmoeTrackError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ContractError(HmoeTrackError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(HmoeTrackError, ValueError):
    """An invalid configuration value."""
