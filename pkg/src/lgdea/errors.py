"""Exception hierarchy shared by every module."""


class LGDEAError(Exception):
    """Base class for all package errors."""


class DimensionError(LGDEAError, ValueError):
    pass


class ParameterError(LGDEAError, ValueError):
    pass


class UsageError(LGDEAError, RuntimeError):
    pass


class NumericError(LGDEAError, FloatingPointError):
    """A non-finite value appeared where finiteness is guaranteed."""


class ConfigError(LGDEAError, ValueError):
    pass


class InputError(LGDEAError, ValueError):
    pass


class FormatError(LGDEAError, ValueError):
    """Malformed, truncated or wrong-version file."""


class ExtractionError(LGDEAError, RuntimeError):
    """Evidence extraction backend failure; keeps the raw response."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw
