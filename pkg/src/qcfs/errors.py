"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, data/IO problems
exit 2 (verification failures use 3 and are not exceptions).
"""


class QcfsError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(QcfsError):
    """An API was called in a way it does not support."""


class DimensionError(QcfsError, ValueError):
    """Operand shapes do not compose."""


class ConfigurationError(QcfsError, ValueError):
    """Hyperparameters or layer settings are invalid."""


class NonFiniteError(QcfsError, FloatingPointError):
    """An operation produced NaN or Inf."""


class TransformError(QcfsError):
    """A layer cannot be rewritten into its QCFS counterpart."""


class ConversionError(QcfsError):
    """An ANN cannot be converted into a spiking network."""


class DivergenceError(QcfsError):
    """Training produced a non-finite loss."""


class DataError(QcfsError):
    """Dataset contents are missing or inconsistent."""

    exit_code = 2


class FormatError(DataError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataError):
    """A checkpoint failed its version or integrity checks."""


class ModelKindError(CheckpointError, TypeError):
    """A checkpoint holds a different model kind than requested."""
