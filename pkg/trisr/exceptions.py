"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from typing import Any, Dict, Optional

from trisr.config import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE


class TrisrError(Exception):
    """Base class for all trisr failures."""

    exit_code = EXIT_DATA


class UsageError(TrisrError):
    exit_code = EXIT_USAGE


class DataError(TrisrError):
    """Bad input data or file contents."""

    exit_code = EXIT_DATA


class FormatError(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class TruncatedFile(DataError):
    pass


class DegenerateRange(DataError):
    pass


class OddDimension(DataError):
    pass


class GridMismatch(DataError):
    pass


class IoError(DataError):
    pass


class CheckpointError(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class NumericError(TrisrError):
    exit_code = EXIT_NUMERIC


class MissingGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(
        self,
        message: str,
        iteration: int,
        losses: Optional[Dict[str, Any]] = None,
        dump_path: Optional[str] = None,
    ):
        super().__init__(message)
        self.iteration = iteration
        self.losses = losses or {}
        self.dump_path = dump_path
