"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Input array holds non-finite or otherwise unusable values."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward on a stale cache)."""


class IDXParseError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(DomainError):
    """A training configuration is malformed or inconsistent."""
