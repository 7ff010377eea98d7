"""Exception hierarchy shared across the package."""


class CRCNNError(Exception):
    """Base class for all package errors."""


class ShapeError(CRCNNError, ValueError):
    pass


class DegenerateBatchError(CRCNNError, ValueError):
    """Batch norm in train mode needs at least two elements per channel."""


class InvalidMaskError(CRCNNError, ValueError):
    pass


class CheckpointFormatError(CRCNNError):
    pass


class DataError(CRCNNError):
    """Missing, unreadable or inconsistent input data."""


class DivergenceError(CRCNNError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class UndefinedMetricsError(CRCNNError, ValueError):
    """Raised when metrics are requested for a report with no scored pixels."""
