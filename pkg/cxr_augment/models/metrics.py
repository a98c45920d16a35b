"""Evaluation models: predictions, confusion matrices, reports and ROC curves."""

from typing import Any, Dict, List, Sequence

import numpy as np

from cxr_augment.exceptions import LabelError
from cxr_augment.models.base import BaseModel


class PredictionSet(BaseModel):
    """Per-sample true label, predicted label and class probability vector."""

    true_labels: np.ndarray
    predicted_labels: np.ndarray
    probabilities: np.ndarray
    class_names: List[str]

    def __init__(
        self,
        true_labels: Sequence[int],
        predicted_labels: Sequence[int],
        probabilities: Sequence[Sequence[float]],
        class_names: Sequence[str],
    ) -> None:
        true_arr = np.asarray(true_labels, dtype=np.int64).reshape(-1)
        pred_arr = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
        prob_arr = np.asarray(probabilities, dtype=np.float64)
        k = len(class_names)
        if prob_arr.size == 0:
            prob_arr = prob_arr.reshape(0, k)
        if true_arr.shape != pred_arr.shape or prob_arr.shape != (len(true_arr), k):
            raise LabelError(
                "Prediction arrays disagree in length or class count",
                {
                    "true": list(true_arr.shape),
                    "predicted": list(pred_arr.shape),
                    "probabilities": list(prob_arr.shape),
                },
            )
        if len(prob_arr) and (
            (prob_arr < 0).any() or not np.allclose(prob_arr.sum(axis=1), 1.0, atol=1e-6)
        ):
            raise LabelError("Probability rows must be non-negative and sum to 1")
        super().__init__(
            true_labels=true_arr,
            predicted_labels=pred_arr,
            probabilities=prob_arr,
            class_names=list(class_names),
        )

    def __len__(self) -> int:
        return len(self.true_labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def accuracy(self) -> float:
        if len(self) == 0:
            return 0.0
        return float((self.true_labels == self.predicted_labels).mean())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PredictionSet":
        return cls(
            true_labels=data["true_labels"],
            predicted_labels=data["predicted_labels"],
            probabilities=data["probabilities"],
            class_names=data["class_names"],
        )


class ConfusionMatrix(BaseModel):
    """K x K counts; rows are actual classes, columns are predicted classes."""

    counts: np.ndarray
    class_names: List[str]

    def __init__(self, counts: Sequence[Sequence[int]], class_names: Sequence[str]) -> None:
        arr = np.asarray(counts, dtype=np.int64)
        k = len(class_names)
        if arr.shape != (k, k):
            raise LabelError(f"Confusion matrix must be {k}x{k}, got {arr.shape}")
        if (arr < 0).any():
            raise LabelError("Confusion matrix counts must be non-negative")
        super().__init__(counts=arr, class_names=list(class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConfusionMatrix":
        return cls(counts=data["counts"], class_names=data["class_names"])


class ClassMetrics(BaseModel):
    """Precision, recall, F1 and support for one class (or an average row)."""

    name: str
    precision: float
    recall: float
    f1: float
    support: int


class ClassificationReport(BaseModel):
    """Per-class metrics with accuracy, macro and weighted averages."""

    classes: List[ClassMetrics]
    accuracy: float
    macro_avg: ClassMetrics
    weighted_avg: ClassMetrics
    total: int

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClassificationReport":
        return cls(
            classes=ClassMetrics.list_from_dicts(data["classes"]),
            accuracy=float(data["accuracy"]),
            macro_avg=ClassMetrics.from_dict(data["macro_avg"]),
            weighted_avg=ClassMetrics.from_dict(data["weighted_avg"]),
            total=int(data["total"]),
        )


class RocCurve(BaseModel):
    """One-vs-rest ROC polyline for one class with its trapezoidal AUC."""

    class_name: str
    class_id: int
    thresholds: List[float]
    fpr: List[float]
    tpr: List[float]
    auc: float

    @property
    def points(self) -> List[tuple]:
        return list(zip(self.fpr, self.tpr))

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"threshold": t, "fpr": f, "tpr": p}
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr)
        ]
