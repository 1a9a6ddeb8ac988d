"""Exception types shared across the package."""


class DPOLabError(Exception):
    """Base class for all package errors."""


class ConfigError(DPOLabError, ValueError):
    """Invalid configuration, shape mismatch or out-of-bounds parameter."""


class InputError(DPOLabError, ValueError):
    """Invalid runtime input such as a label outside the class range."""


class FormatError(DPOLabError):
    """A file does not follow the expected binary layout."""


class ChecksumError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ConsistencyError(DPOLabError):
    """Two related inputs disagree (e.g. image and label counts)."""
