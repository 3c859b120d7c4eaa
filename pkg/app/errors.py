"""Exception hierarchy shared by the engine, the pipeline and the CLI.

Every error carries the process exit code the CLI uses for it.
"""


class KDError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(KDError):
    """Invalid configuration, unresolved reference or model/data mismatch."""

    exit_code = 2


class DimensionError(ConfigError, ValueError):
    """Tensor operands whose shapes do not compose."""


class DataError(KDError):
    """Dataset contents violate a contract (empty split, bad sizes, labels)."""

    exit_code = 3


class DataFormatError(DataError):
    """A dataset file is malformed; the message names the byte offset or line."""


class NumericError(KDError):
    """Non-finite values or an invalid differentiation request."""

    exit_code = 4


class DomainError(NumericError, ValueError):
    """A pointwise function received an argument outside its domain."""


class GradError(NumericError):
    """backward() was called with a loss that violates its contract."""


class StorageError(KDError):
    """A file could not be read or written."""

    exit_code = 5


class CheckpointError(StorageError):
    """Checkpoint magic, version, digest or length check failed."""
