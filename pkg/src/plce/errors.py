"""Exception types shared across the package.

The CLI maps each family to its own exit code.
"""


class PlceError(Exception):
    """Base class for package errors."""


class AudioError(PlceError, ValueError):
    """Unreadable, malformed or unsupported audio."""


class ModelError(PlceError, ValueError):
    """Bad weight file or inconsistent model configuration."""


class DataError(PlceError, ValueError):
    """Empty or malformed dataset / manifest."""
