"""Exception hierarchy shared by the library and the CLI."""


class IQAError(Exception):
    """Base class for all package errors."""


class ArgumentError(IQAError, ValueError):
    """Invalid shapes, axes, ratios or other caller-supplied arguments."""


class DegenerateInputError(ArgumentError):
    """Input without enough variation for the requested statistic."""


class NumericError(IQAError, ArithmeticError):
    """A computation produced NaN or infinity."""


class DataError(IQAError):
    """Problems reading manifests, images or other input files."""


class ManifestError(DataError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class UnsupportedKindError(DataError, ValueError):
    """Operation not defined for this manifest kind."""


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass
