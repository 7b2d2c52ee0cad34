"""Exceptions raised by the GeoMoE toolkit."""
from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .network.checkpoint import ModelCheckpoint


class GeoMoEException(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidInputException(GeoMoEException):
    """Input data violates a precondition (non-finite values, shapes, sizes)."""

    def __init__(self, message: str, index: int | None = None) -> None:
        """Initialize with an optional offending element index."""
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)
        self.index = index


class RankDeficientException(GeoMoEException):
    """Too few effective constraints to determine the model."""


class DegenerateConfigurationException(GeoMoEException):
    """The input configuration does not determine a unique model."""


class CheiralityException(GeoMoEException):
    """No pose candidate places any point in front of both cameras."""


class EstimationFailureException(GeoMoEException):
    """A robust estimator could not produce a valid model."""


class InsufficientContextException(InvalidInputException):
    """A set operation received fewer rows than it needs."""


class GenerationFailureException(GeoMoEException):
    """The scene generator ran out of its point budget."""


class DatasetFormatException(GeoMoEException):
    """A dataset file is malformed, truncated or of an unknown version."""

    def __init__(self, message: str, last_complete_record: int | None = None) -> None:
        """Initialize with the index of the last record read successfully."""
        if last_complete_record is not None:
            message = f"{message} (last complete record: {last_complete_record})"
        super().__init__(message)
        self.last_complete_record = last_complete_record


class CheckpointFormatException(GeoMoEException):
    """A checkpoint file is malformed or does not match its configuration."""


class ConfigMismatchException(GeoMoEException):
    """Two artifacts disagree on their configuration."""


class InvalidConfigException(GeoMoEException):
    """A configuration value is missing, unknown or out of range."""

    def __init__(self, key: str, message: str) -> None:
        """Initialize with the dotted key path of the offending value."""
        super().__init__(f"{key}: {message}")
        self.key = key


class NumericalFailureException(GeoMoEException):
    """A computation produced non-finite values."""

    def __init__(
        self, message: str, checkpoint: ModelCheckpoint | None = None, **details: Any
    ) -> None:
        """Initialize with the last good checkpoint when one exists."""
        super().__init__(message)
        self.checkpoint = checkpoint
        self.details = details
