"""Exception hierarchy shared by every subpackage."""


class CCTProbeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CCTProbeError, ValueError):
    """An architecture, optimizer or run configuration is invalid.

    ``field`` names the offending configuration key when one is known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class InputError(CCTProbeError, ValueError):
    """A tensor or data argument has the wrong shape or content."""


class IngestionError(CCTProbeError, IOError):
    """A dataset file is missing, truncated or malformed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class NumericError(CCTProbeError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ChecksumError(CCTProbeError, IOError):
    """A checkpoint failed its integrity check or has an unknown version."""
