"""Classifier models: backbone ids, learning curves and layer summaries."""

from enum import Enum
from typing import Any, Dict, List

from cxr_augment.models.base import BaseModel


class BackboneId(str, Enum):
    """Supported frozen-backbone architectures."""

    VGG16 = "VGG16"
    RESNET50 = "RESNET50"
    GOOGLENET = "GOOGLENET"
    MNASNET = "MNASNET"

    @classmethod
    def parse(cls, value: str) -> "BackboneId":
        """Parse a backbone name case-insensitively (``vgg16`` -> VGG16)."""
        normalized = value.strip().upper().replace("-", "").replace("_", "")
        for member in cls:
            if member.value == normalized:
                return member
        raise ValueError(
            f"Unknown backbone '{value}'; expected one of {[m.value.lower() for m in cls]}"
        )


class EpochRecord(BaseModel):
    """Metrics for one completed classifier epoch."""

    epoch: int
    train_loss: float
    validation_loss: float
    train_accuracy: float
    validation_accuracy: float


class LearningCurve(BaseModel):
    """Per-epoch train/validation losses and accuracies."""

    epochs: List[EpochRecord]

    def __init__(self, epochs: List[EpochRecord] = None) -> None:
        super().__init__(epochs=list(epochs or []))

    def __len__(self) -> int:
        return len(self.epochs)

    def append(self, record: EpochRecord) -> None:
        self.epochs.append(record)

    def rows(self) -> List[Dict[str, Any]]:
        return [record.to_dict() for record in self.epochs]

    @property
    def best_epoch(self) -> int:
        """Epoch with the highest validation accuracy (earliest on ties)."""
        best = max(self.epochs, key=lambda r: (r.validation_accuracy, -r.epoch))
        return best.epoch

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LearningCurve":
        return cls(epochs=[EpochRecord.from_dict(r) for r in data.get("epochs", [])])


class LayerInfo(BaseModel):
    """One leaf module of a classifier."""

    name: str
    type: str
    parameters: int
    trainable: int


class ModelSummary(BaseModel):
    """Layer inventory and parameter accounting of a classifier."""

    backbone: BackboneId
    layers: List[LayerInfo]
    trainable_parameters: int
    frozen_parameters: int
    total_parameters: int

    def render(self) -> str:
        """Render a fixed-width layer table followed by the parameter totals."""
        width = max([len(layer.name) for layer in self.layers] + [10])
        lines = [
            f"{'Layer':<{width}}  {'Type':<24}{'Params':>14}",
            "=" * (width + 40),
        ]
        for layer in self.layers:
            lines.append(f"{layer.name:<{width}}  {layer.type:<24}{layer.parameters:>14,}")
        lines += [
            "=" * (width + 40),
            f"Total params: {self.total_parameters:,}",
            f"Trainable params: {self.trainable_parameters:,}",
            f"Non-trainable params: {self.frozen_parameters:,}",
        ]
        return "\n".join(lines)
