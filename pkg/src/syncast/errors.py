"""Exception hierarchy shared across the package."""


class SyncastError(Exception):
    """Base class for all package errors."""


class InvalidGridError(SyncastError):
    pass


class InvalidRegionError(SyncastError):
    pass


class InvalidValueError(SyncastError):
    pass


class InvalidStatsError(SyncastError):
    pass


class InvalidConfigError(SyncastError):
    pass


class EmptyDatasetError(SyncastError):
    pass


class FileFormatError(SyncastError):
    """Base for grid-file / checkpoint parse errors."""


class MagicMismatchError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class HeaderError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


class ShapeError(SyncastError):
    pass


class AlignmentError(SyncastError):
    pass


class NumericFailureError(SyncastError):
    def __init__(self, message, layer_index=None, step=None):
        super().__init__(message)
        self.layer_index = layer_index
        self.step = step


class TrainingDivergedError(SyncastError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FrozenViolationError(SyncastError):
    pass


class SamplingFailureError(SyncastError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InsufficientDataError(SyncastError):
    pass


class UndefinedRateError(SyncastError):
    pass


class DivisionByZeroQuantileError(SyncastError):
    pass
