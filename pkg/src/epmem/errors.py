"""Exception taxonomy shared by all modules.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class EpmemError(Exception):
    """Base class for every error raised by this package."""


class InputError(EpmemError):
    """A rejected input: malformed token sequence, bad label, empty context."""


class ConfigError(EpmemError):
    """Invalid or inconsistent configuration."""


class DataError(EpmemError):
    """Broken dataset files, manifests, or serialized artifacts."""


class NumericalError(EpmemError):
    """Non-finite values encountered where finite math was required."""


class CapacityError(EpmemError):
    """Memory write refused because the configured hard capacity is full."""


class RetrievalUnavailableError(EpmemError):
    """Nearest-neighbor lookup requested against an empty memory."""
