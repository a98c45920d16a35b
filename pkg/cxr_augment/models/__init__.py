"""Record models for the cxr_augment toolkit."""

from cxr_augment.models.classifier import (
    BackboneId,
    EpochRecord,
    LayerInfo,
    LearningCurve,
    ModelSummary,
)
from cxr_augment.models.gan import CriticStep, GanTrainRecord, SelectionStrategy
from cxr_augment.models.labels import (
    DEFAULT_CLASS_NAMES,
    ClassLabel,
    label_by_name,
    make_labels,
)
from cxr_augment.models.manifest import RunManifest
from cxr_augment.models.metrics import (
    ClassificationReport,
    ClassMetrics,
    ConfusionMatrix,
    PredictionSet,
    RocCurve,
)
from cxr_augment.models.sample import (
    DatasetRole,
    ImageSample,
    LabeledDataset,
    SampleSource,
)

__all__ = [
    "BackboneId",
    "EpochRecord",
    "LayerInfo",
    "LearningCurve",
    "ModelSummary",
    "CriticStep",
    "GanTrainRecord",
    "SelectionStrategy",
    "DEFAULT_CLASS_NAMES",
    "ClassLabel",
    "label_by_name",
    "make_labels",
    "RunManifest",
    "ClassificationReport",
    "ClassMetrics",
    "ConfusionMatrix",
    "PredictionSet",
    "RocCurve",
    "DatasetRole",
    "ImageSample",
    "LabeledDataset",
    "SampleSource",
]
