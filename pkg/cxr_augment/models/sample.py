"""Image sample and dataset models."""

from collections import Counter
from enum import Enum
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import torch

from cxr_augment.exceptions import ConfigurationError
from cxr_augment.models.base import BaseModel
from cxr_augment.models.labels import ClassLabel


class SampleSource(str, Enum):
    """Where a sample came from."""

    REAL = "REAL"
    SYNTHETIC = "SYNTHETIC"


class DatasetRole(str, Enum):
    """Role a dataset plays in an experiment."""

    TRAIN = "TRAIN"
    VALIDATION = "VALIDATION"
    TEST = "TEST"


class ImageSample(BaseModel):
    """A normalized pixel grid (C x H x W, values in [-1, 1]) with its label.

    ``epoch`` and ``index`` are set for synthetic samples and order them by
    generation time; ``score`` holds a critic score when one was computed.
    """

    pixels: torch.Tensor
    label: ClassLabel
    source: SampleSource
    origin: str
    epoch: Optional[int]
    index: Optional[int]
    score: Optional[float]

    def __init__(
        self,
        pixels: torch.Tensor,
        label: ClassLabel,
        source: SampleSource = SampleSource.REAL,
        origin: str = "",
        epoch: Optional[int] = None,
        index: Optional[int] = None,
        score: Optional[float] = None,
    ) -> None:
        super().__init__(
            pixels=pixels,
            label=label,
            source=source,
            origin=origin,
            epoch=epoch,
            index=index,
            score=score,
        )

    @property
    def shape(self) -> tuple:
        return tuple(self.pixels.shape)

    def with_pixels(self, pixels: torch.Tensor) -> "ImageSample":
        """Return a copy carrying different pixels and the same metadata."""
        return ImageSample(
            pixels=pixels,
            label=self.label,
            source=self.source,
            origin=self.origin,
            epoch=self.epoch,
            index=self.index,
            score=self.score,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert metadata to a dictionary; pixels are summarized by shape."""
        return {
            "shape": list(self.shape),
            "label": self.label.to_dict(),
            "source": self.source.value,
            "origin": self.origin,
            "epoch": self.epoch,
            "index": self.index,
            "score": self.score,
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageSample):
            return NotImplemented
        return self.to_dict() == other.to_dict() and torch.equal(
            self.pixels, other.pixels
        )

    __hash__ = None  # type: ignore[assignment]


class LabeledDataset(BaseModel):
    """An immutable ordered collection of samples over a registered label set."""

    samples: tuple
    role: DatasetRole
    labels: tuple

    def __init__(
        self,
        samples: Iterable[ImageSample],
        labels: Sequence[ClassLabel],
        role: DatasetRole = DatasetRole.TRAIN,
    ) -> None:
        samples = tuple(samples)
        labels = tuple(labels)
        registered = set(labels)
        for sample in samples:
            if sample.label not in registered:
                raise ConfigurationError(
                    f"Sample '{sample.origin}' carries unregistered label {sample.label}",
                    {"origin": sample.origin},
                )
        super().__init__(samples=samples, role=role, labels=labels)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    def __getitem__(self, idx: int) -> ImageSample:
        return self.samples[idx]

    def counts(self) -> Dict[str, int]:
        """Per-class sample counts, including zero counts, in label order."""
        counter = Counter(sample.label.name for sample in self.samples)
        return {label.name: counter.get(label.name, 0) for label in self.labels}

    def of_class(self, label: ClassLabel) -> "LabeledDataset":
        """Return the single-class subset for ``label``."""
        return LabeledDataset(
            [s for s in self.samples if s.label == label], self.labels, self.role
        )

    def with_role(self, role: DatasetRole) -> "LabeledDataset":
        return LabeledDataset(self.samples, self.labels, role)

    def select(self, indices: Sequence[int]) -> "LabeledDataset":
        """Return the subset at ``indices`` in the given order."""
        return LabeledDataset([self.samples[i] for i in indices], self.labels, self.role)

    def map(self, fn: Callable[[ImageSample], ImageSample]) -> "LabeledDataset":
        return LabeledDataset([fn(s) for s in self.samples], self.labels, self.role)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if tuple(other.labels) != tuple(self.labels):
            raise ConfigurationError("Cannot concatenate datasets with different label sets")
        return LabeledDataset(self.samples + other.samples, self.labels, self.role)

    def origins(self) -> List[str]:
        return [sample.origin for sample in self.samples]

    def to_dict(self) -> Dict[str, Any]:
        """Summarize the dataset: role, label set and per-class counts."""
        return {
            "role": self.role.value,
            "labels": [label.to_dict() for label in self.labels],
            "counts": self.counts(),
            "total": len(self),
        }

    __hash__ = None  # type: ignore[assignment]
