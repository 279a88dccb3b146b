"""Exception hierarchy. Each category carries the process exit code used by the CLI."""


class FactostError(Exception):
    exit_code = 1


class ConfigError(FactostError, ValueError):
    exit_code = 2


class DataError(FactostError, ValueError):
    """Bad input data: non-finite values, ragged CSV rows, stride violations."""

    exit_code = 3


class WindowError(DataError):
    pass


class MetadataError(DataError):
    pass


class NumericError(FactostError, FloatingPointError):
    """NaN/Inf encountered during a forward pass or training step."""

    exit_code = 4


class CheckpointError(FactostError):
    exit_code = 5


class TransferError(CheckpointError):
    pass


class AdapterShapeError(DataError):
    """Panel node count disagrees with the adapter's node bank."""
