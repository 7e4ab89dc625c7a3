"""Exception hierarchy shared by every sfml module."""


class SFMLError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SFMLError, ValueError):
    """Inconsistent dimensions, empty sampling boxes, unknown names."""


class DomainError(SFMLError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class NumericalError(SFMLError, ArithmeticError):
    """Ill-conditioned or non-finite intermediate results."""


class DivergenceError(NumericalError):
    """A simulator produced a non-finite state."""


class ModelError(SFMLError):
    """A user-supplied model returned values violating its contract."""


class RunawayError(SFMLError):
    """A jump-process simulation exceeded its event budget."""


class FormatError(SFMLError):
    """A binary file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(SFMLError):
    """Training produced a non-finite loss."""
