"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3, numeric failures with 4, and checkpoint or
other I/O failures with 5.
"""


class CrystensError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CrystensError):
    """Invalid or inconsistent configuration values."""


class DataError(CrystensError):
    """Malformed input data: structure files, datasets, property tables."""


class NumericError(CrystensError):
    """Non-finite values encountered during training or inference."""


class CheckpointError(CrystensError):
    """Unreadable, corrupt, or internally inconsistent checkpoint files."""
