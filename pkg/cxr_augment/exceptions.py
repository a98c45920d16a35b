"""Exceptions for the cxr_augment toolkit."""

from typing import Any, Dict, Optional


class CxrAugmentError(Exception):
    """Base exception for all toolkit errors."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigurationError(CxrAugmentError):
    """Exception raised when configuration or input layout is invalid."""

    pass


class ShapeError(CxrAugmentError):
    """Exception raised when a tensor does not have the expected shape."""

    pass


class ImageDecodeError(CxrAugmentError):
    """Exception raised when an image file cannot be decoded."""

    def __init__(self, message: str, path: str) -> None:
        super().__init__(message, {"path": path})
        self.path = path


class LabelError(CxrAugmentError):
    """Exception raised when a class label is outside [0, K)."""

    pass


class TrainingInstabilityError(CxrAugmentError):
    """Exception raised when a loss or gradient becomes non-finite."""

    def __init__(
        self,
        message: str,
        step: int,
        details: Optional[Dict[str, Any]] = None,
    ) -> None:
        super().__init__(message, details)
        self.step = step


class CheckpointError(CxrAugmentError):
    """Exception raised when a checkpoint cannot be read or applied."""

    pass


class FingerprintMismatchError(CheckpointError):
    """Exception raised when a checkpoint was written under a different config."""

    def __init__(self, expected: str, found: str) -> None:
        super().__init__(
            f"Config fingerprint mismatch: expected {expected[:12]}, found {found[:12]}",
            {"expected": expected, "found": found},
        )
        self.expected = expected
        self.found = found


class MissingArtifactError(CxrAugmentError):
    """Exception raised when a prerequisite artifact is absent."""

    pass


class PretrainedWeightsError(CxrAugmentError):
    """Exception raised when pretrained backbone weights cannot be used.

    ``reason`` is one of ``missing``, ``checksum`` or ``download``.
    """

    def __init__(self, message: str, reason: str, path: Optional[str] = None) -> None:
        super().__init__(message, {"reason": reason, "path": path})
        self.reason = reason
        self.path = path


class SelectionError(CxrAugmentError):
    """Exception raised when an image pool is too small for a selection."""

    def __init__(self, pool_size: int, requested: int) -> None:
        super().__init__(
            f"Cannot select {requested} images from a pool of {pool_size}",
            {"pool_size": pool_size, "requested": requested},
        )
        self.pool_size = pool_size
        self.requested = requested


class RocUndefinedError(CxrAugmentError):
    """Exception raised when a class has no positive or no negative samples."""

    def __init__(self, message: str, class_name: str) -> None:
        super().__init__(message, {"class": class_name})
        self.class_name = class_name
