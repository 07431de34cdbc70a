"""Exception taxonomy shared across the package.

The CLI maps these to process exit codes: ConfigError -> 2,
DataError -> 3, NumericsError -> 4.
"""


class GnodeformerError(Exception):
    """Base class for all package errors."""


class ConfigError(GnodeformerError):
    """Invalid configuration or incompatible option combination."""


class DataError(GnodeformerError):
    """Malformed or inconsistent dataset input."""


class NumericsError(GnodeformerError):
    """Non-finite values or a numerical procedure that failed to converge."""
