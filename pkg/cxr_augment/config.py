"""
Configuration records for every pipeline stage.

All records are pydantic models so a YAML config file validates in one pass.
``fingerprint()`` hashes the canonical JSON of a record; checkpoints and
model artifacts store it to detect incompatible resumes.
"""

import hashlib
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import ClassVar, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from cxr_augment.exceptions import ConfigurationError
from cxr_augment.models.classifier import BackboneId
from cxr_augment.models.gan import SelectionStrategy
from cxr_augment.models.labels import DEFAULT_CLASS_NAMES

logger = logging.getLogger("cxr-config")

GAN_IMAGE_SIZE = 128
CLASSIFIER_IMAGE_SIZE = 224
FIRST_STAGE_SIZE = 8

# Default classifier epochs per backbone.
DEFAULT_CLASSIFIER_EPOCHS: Dict[BackboneId, int] = {
    BackboneId.VGG16: 10,
    BackboneId.RESNET50: 30,
    BackboneId.GOOGLENET: 10,
    BackboneId.MNASNET: 10,
}


def fingerprint_of(payload: dict) -> str:
    """SHA-256 of the canonical JSON form of ``payload``."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def stages_for_size(size: int, num_stages: Optional[int] = None) -> int:
    """Stage count that reaches ``size``: the first stage yields 8x8, later ones double.

    Raises:
        ConfigurationError: if ``size`` is not 8 * 2**k or disagrees with ``num_stages``
    """
    if size < FIRST_STAGE_SIZE or size & (size - 1):
        raise ConfigurationError(
            f"Image size {size} is not a power of two >= {FIRST_STAGE_SIZE}",
            {"size": size},
        )
    implied = int(math.log2(size // FIRST_STAGE_SIZE)) + 1
    if num_stages is not None and num_stages != implied:
        raise ConfigurationError(
            f"Size {size} needs {implied} stages, config asks for {num_stages}",
            {"size": size, "num_stages": num_stages, "implied": implied},
        )
    return implied


def _check_stages(size: int, num_stages: Optional[int]) -> None:
    try:
        stages_for_size(size, num_stages)
    except ConfigurationError as e:
        raise ValueError(e.message) from e


def _check_explicit(record: BaseModel, field: str, expected: object, source: str) -> None:
    """Reject a nested value that was set explicitly and disagrees with ``source``."""
    if field in record.model_fields_set and getattr(record, field) != expected:
        raise ValueError(
            f"{type(record).__name__}.{field}={getattr(record, field)} conflicts with {source}={expected}"
        )


class _Record(BaseModel):
    """Shared behaviour for config records."""

    model_config = {"extra": "forbid"}

    # Fields that change how long a run lasts but not what it computes.
    RUN_LENGTH_FIELDS: ClassVar[Tuple[str, ...]] = ()

    def fingerprint(self) -> str:
        return fingerprint_of(
            self.model_dump(mode="json", exclude=set(self.RUN_LENGTH_FIELDS))
        )


class SplitSpec(_Record):
    """Seeded uniform random train/validation partition."""

    validation_fraction: float = Field(
        0.2, gt=0.0, lt=1.0, description="Share of the pool held out for validation"
    )
    seed: int = Field(0, description="Seed of the partition")


class AugmentationPolicy(_Record):
    """Classifier-side augmentation: horizontal flip, zero padding, random crop."""

    horizontal_flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    pad_pixels: int = Field(4, ge=0, description="Padding on every side, value -1")
    crop_size: Tuple[int, int] = Field(
        (CLASSIFIER_IMAGE_SIZE, CLASSIFIER_IMAGE_SIZE), description="(height, width)"
    )

    @field_validator("crop_size")
    @classmethod
    def _positive_crop(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] < 1 or value[1] < 1:
            raise ValueError("crop_size entries must be positive")
        return value

    @model_validator(mode="after")
    def _crop_fits(self) -> "AugmentationPolicy":
        limit = CLASSIFIER_IMAGE_SIZE + 2 * self.pad_pixels
        if self.crop_size[0] > limit or self.crop_size[1] > limit:
            raise ValueError(
                f"crop_size {tuple(self.crop_size)} exceeds the padded {limit} x {limit} input"
            )
        return self


class GeneratorConfig(_Record):
    """Transpose-convolution generator from z_dim x 1 x 1 to out_channels x out_size^2.

    ``num_stages`` defaults to the count implied by ``out_size``: the first
    stage produces 8 x 8 and each later stage doubles the side.
    """

    z_dim: int = Field(128, ge=1)
    hidden_dim: int = Field(16, ge=1, description="Base channel width")
    out_channels: int = Field(1, ge=1)
    out_size: int = Field(GAN_IMAGE_SIZE, ge=1)
    num_stages: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _reachable_size(self) -> "GeneratorConfig":
        _check_stages(self.out_size, self.num_stages)
        return self


class CriticConfig(_Record):
    """Strided-convolution critic mirroring the generator; no normalization layers."""

    in_channels: int = Field(1, ge=1)
    hidden_dim: int = Field(16, ge=1)
    in_size: int = Field(GAN_IMAGE_SIZE, ge=1)
    num_stages: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _reachable_size(self) -> "CriticConfig":
        _check_stages(self.in_size, self.num_stages)
        return self


class GanTrainConfig(_Record):
    """Hyperparameters of one per-class WGAN-GP run."""

    epochs: int = Field(2000, ge=1)
    max_steps: Optional[int] = Field(
        None, ge=1, description="Stop after this many generator updates"
    )
    batch_size: int = Field(20, ge=2)
    learning_rate_generator: float = Field(2e-4, gt=0)
    learning_rate_critic: float = Field(2e-4, gt=0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    # Conventional WGAN-GP setups use 0.9.
    beta2: float = Field(0.0009, ge=0.0, lt=1.0)
    gp_weight: float = Field(10.0, ge=0.0)
    n_critic: int = Field(5, ge=1)
    z_dim: int = Field(128, ge=1)
    seed: int = 0
    snapshot_every: int = Field(100, ge=1, description="Epochs between snapshot grids")
    checkpoint_every: int = Field(100, ge=1, description="Epochs between checkpoints")
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    critic: CriticConfig = Field(default_factory=CriticConfig)

    RUN_LENGTH_FIELDS: ClassVar[Tuple[str, ...]] = ("epochs", "max_steps", "snapshot_every", "checkpoint_every")

    @model_validator(mode="after")
    def _sync_networks(self) -> "GanTrainConfig":
        _check_explicit(self.generator, "z_dim", self.z_dim, "z_dim")
        _check_explicit(self.critic, "in_channels", self.generator.out_channels, "generator.out_channels")
        _check_explicit(self.critic, "in_size", self.generator.out_size, "generator.out_size")
        if self.generator.z_dim != self.z_dim:
            self.generator = self.generator.model_copy(update={"z_dim": self.z_dim})
        if self.critic.in_channels != self.generator.out_channels:
            self.critic = self.critic.model_copy(
                update={"in_channels": self.generator.out_channels}
            )
        if self.critic.in_size != self.generator.out_size:
            self.critic = self.critic.model_copy(
                update={"in_size": self.generator.out_size}
            )
        return self

    @property
    def image_size(self) -> int:
        return self.generator.out_size


class ClassifierTrainConfig(_Record):
    """Training hyperparameters for one backbone."""

    backbone: BackboneId = BackboneId.VGG16
    epochs: Optional[int] = Field(None, ge=1, description="Defaults per backbone")
    batch_size: int = Field(50, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    seed: int = 0
    feature_extract: bool = True
    pretrained: bool = False
    weights_path: Optional[Path] = None
    weights_url: Optional[str] = None
    weights_sha256: Optional[str] = None
    input_normalization: str = Field(
        "minus_one_one", pattern="^(minus_one_one|imagenet)$"
    )
    augmentation: AugmentationPolicy = Field(default_factory=AugmentationPolicy)
    num_workers: int = Field(0, ge=0)

    RUN_LENGTH_FIELDS: ClassVar[Tuple[str, ...]] = ("epochs", "num_workers")

    @property
    def num_epochs(self) -> int:
        """Configured epochs, or the backbone default when unset."""
        if self.epochs is None:
            return DEFAULT_CLASSIFIER_EPOCHS[self.backbone]
        return self.epochs

    @classmethod
    def for_backbone(cls, backbone: BackboneId, **overrides) -> "ClassifierTrainConfig":
        return cls(backbone=backbone, **overrides)


class EvaluationSource(str, Enum):
    """Where the evaluation set comes from."""

    REAL = "REAL"
    SYNTHETIC = "SYNTHETIC"


class TrainSource(str, Enum):
    """Which samples make up the classifier training pool."""

    SYNTHETIC = "SYNTHETIC"
    REAL = "REAL"
    BOTH = "BOTH"


class PipelineConfig(_Record):
    """Declarative description of a full pipeline run."""

    real_root: Path = Field(..., description="Directory with one subdirectory per class")
    test_root: Optional[Path] = Field(
        None, description="Held-out real test images, same layout as real_root"
    )
    metadata_csv: Optional[Path] = None
    metadata_view_column: str = "view"
    metadata_view_value: str = "AP"
    metadata_filename_column: str = "filename"
    output_root: Path = Path("outputs")
    class_names: List[str] = Field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))
    gan: GanTrainConfig = Field(default_factory=GanTrainConfig)
    gan_overrides: Dict[str, GanTrainConfig] = Field(
        default_factory=dict, description="Per-class GAN configs by class name"
    )
    generation_counts: Dict[str, int] = Field(default_factory=dict)
    default_generation_count: int = Field(4000, ge=0)
    pool_factor: int = Field(10, ge=1)
    selection_strategy: SelectionStrategy = SelectionStrategy.LATEST_EPOCH
    generation_seed: int = 0
    classifier: ClassifierTrainConfig = Field(default_factory=ClassifierTrainConfig)
    classifier_overrides: Dict[BackboneId, ClassifierTrainConfig] = Field(
        default_factory=dict
    )
    split: SplitSpec = Field(default_factory=SplitSpec)
    train_source: TrainSource = TrainSource.SYNTHETIC
    test_source: EvaluationSource = EvaluationSource.REAL
    test_synthetic_count: int = Field(50, ge=0)

    @field_validator("class_names")
    @classmethod
    def _unique_names(cls, names: List[str]) -> List[str]:
        if not names:
            raise ValueError("class_names must not be empty")
        if len(set(names)) != len(names):
            raise ValueError(f"class_names must be unique, got {names}")
        return names

    @field_validator("generation_counts")
    @classmethod
    def _non_negative_counts(cls, counts: Dict[str, int]) -> Dict[str, int]:
        negative = {k: v for k, v in counts.items() if v < 0}
        if negative:
            raise ValueError(f"generation counts must be >= 0, got {negative}")
        return counts

    @model_validator(mode="after")
    def _known_classes(self) -> "PipelineConfig":
        unknown = (set(self.generation_counts) | set(self.gan_overrides)) - set(
            self.class_names
        )
        if unknown:
            raise ValueError(f"Unknown classes referenced in config: {sorted(unknown)}")
        return self

    @model_validator(mode="after")
    def _test_root_for_real_source(self) -> "PipelineConfig":
        if self.test_source == EvaluationSource.REAL and self.test_root is None:
            raise ValueError("test_source REAL needs test_root")
        return self

    def gan_for(self, class_name: str) -> GanTrainConfig:
        return self.gan_overrides.get(class_name, self.gan)

    def classifier_for(self, backbone: BackboneId) -> ClassifierTrainConfig:
        if backbone in self.classifier_overrides:
            return self.classifier_overrides[backbone]
        return self.classifier.model_copy(update={"backbone": backbone})

    def generation_count(self, class_name: str) -> int:
        return self.generation_counts.get(class_name, self.default_generation_count)

    def model_post_init(self, __context) -> None:
        """Log configuration status after initialization."""
        logger.debug(
            "Configuration: real_root=%s, output_root=%s, classes=%s, train_source=%s, test_source=%s",
            self.real_root,
            self.output_root,
            self.class_names,
            self.train_source.value,
            self.test_source.value,
        )
