"""Exception types shared across the package."""


class RecalError(Exception):
    """Base class for all package errors."""


class ShapeError(RecalError, ValueError):
    pass


class DomainError(RecalError, ValueError):
    pass


class ContractError(RecalError, ValueError):
    pass


class StateError(RecalError, RuntimeError):
    pass


class ConfigError(RecalError, ValueError):
    pass


class FormatError(RecalError, ValueError):
    pass


class NumericalError(RecalError, RuntimeError):
    """Raised when training produces a non-finite loss."""
