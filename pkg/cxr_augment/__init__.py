"""WGAN-GP augmentation and frozen-backbone classification for chest radiographs."""

__version__ = "0.1.0"

from cxr_augment.exceptions import (  # noqa: E402
    CheckpointError,
    ConfigurationError,
    CxrAugmentError,
    FingerprintMismatchError,
    ImageDecodeError,
    LabelError,
    MissingArtifactError,
    PretrainedWeightsError,
    RocUndefinedError,
    SelectionError,
    ShapeError,
    TrainingInstabilityError,
)

__all__ = [
    "__version__",
    "CheckpointError",
    "ConfigurationError",
    "CxrAugmentError",
    "FingerprintMismatchError",
    "ImageDecodeError",
    "LabelError",
    "MissingArtifactError",
    "PretrainedWeightsError",
    "RocUndefinedError",
    "SelectionError",
    "ShapeError",
    "TrainingInstabilityError",
]
