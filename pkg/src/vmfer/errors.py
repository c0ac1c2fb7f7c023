"""Exception types shared across the package."""


class VmferError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatchError(VmferError, ValueError):
    pass


class EmptyInputError(VmferError, ValueError):
    pass


class DomainError(VmferError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigurationError(VmferError, ValueError):
    """Invalid agent, buffer or experiment configuration."""


class NumericalError(VmferError, RuntimeError):
    """A NaN or infinity reached a place where only finite values are allowed."""
