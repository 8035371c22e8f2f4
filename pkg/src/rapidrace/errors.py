"""Exception types shared across the package."""


class RaceError(Exception):
    """Base class for errors raised by rapidrace."""


class DomainError(RaceError, ValueError):
    """A numeric input is outside the domain of an operation (e.g. NaN state)."""


class ConfigurationError(RaceError, ValueError):
    """Inconsistent configuration: mismatched lengths, bad bounds, unknown ids."""


class PreconditionError(RaceError, ValueError):
    """Arguments violate an operation's stated precondition."""


class SolverError(RaceError, RuntimeError):
    """The optimizer received non-finite values from a problem callback."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate
