# scripts/errors.py
from typing import Iterable, Optional


class CelpError(Exception):
    """Base class for every error raised by the library."""


class DimensionError(CelpError, ValueError):
    pass


class EmptyRegionError(CelpError):
    """Masked pooling selected no positions."""


class EmptyCandidateError(CelpError):
    """No position qualifies as a latent-region center."""


class InvalidCenterError(CelpError):
    pass


class TensorFormatError(CelpError):
    """Malformed tensor file. `offset` is the byte position where reading failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UnsupportedDtypeError(TensorFormatError):
    pass


class CheckpointError(CelpError):
    pass


class StepOverflowError(CelpError):
    pass


class EmptyAccumulatorError(CelpError):
    pass


class ConfigError(CelpError):
    def __init__(self, message: str, fields: Iterable[str] = ()):
        self.fields = list(fields)
        super().__init__(message)
