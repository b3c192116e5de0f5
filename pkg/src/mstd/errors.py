"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code so command wrappers can translate
failures uniformly: ConfigError -> 2, DataFormatError/CheckpointError -> 3,
MissingArtifactError -> 4, DivergenceError -> 5.
"""


class MstdError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MstdError):
    """Invalid configuration: unknown keys, bad values, broken invariants."""

    exit_code = 2


class DimensionError(MstdError):
    """Tensor shape mismatch; message names both offending shapes."""

    exit_code = 2


class DataFormatError(MstdError):
    """Malformed data or checkpoint payload (bad magic, truncation, ...)."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataFormatError):
    """Malformed checkpoint file."""


class MissingArtifactError(MstdError):
    """A required checkpoint or file from an earlier stage is absent."""

    exit_code = 4


class DivergenceError(MstdError):
    """Training produced a non-finite value; message names the culprit."""

    exit_code = 5


class GraphError(MstdError):
    """Autodiff graph misuse: double backward, non-scalar loss, ..."""

    exit_code = 1
