"""
Classification metrics computed from scratch with numpy.

Confusion matrices are oriented rows = actual, columns = predicted. Any
ratio whose denominator is zero is reported as 0. Computed values keep full
precision; only ``render_report`` and ``format_metric`` round, half-up to
two decimals.
"""

import logging
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from cxr_augment.exceptions import LabelError, RocUndefinedError
from cxr_augment.models.labels import ClassLabel
from cxr_augment.models.metrics import (
    ClassificationReport,
    ClassMetrics,
    ConfusionMatrix,
    PredictionSet,
    RocCurve,
)

logger = logging.getLogger("cxr-metrics")

ClassRef = Union[int, ClassLabel]


def _index(c: ClassRef) -> int:
    return c.id if isinstance(c, ClassLabel) else int(c)


def _ratio(numerator: float, denominator: float) -> float:
    return float(numerator) / float(denominator) if denominator else 0.0


def confusion_matrix(preds: PredictionSet, k: Optional[int] = None) -> ConfusionMatrix:
    """Count (actual, predicted) pairs into a K x K grid.

    Raises:
        LabelError: if any true or predicted label lies outside [0, K)
    """
    k = preds.num_classes if k is None else k
    for name, labels in (("true", preds.true_labels), ("predicted", preds.predicted_labels)):
        if len(labels) and (labels.min() < 0 or labels.max() >= k):
            bad = sorted({int(v) for v in labels if v < 0 or v >= k})
            raise LabelError(
                f"{name.capitalize()} labels {bad} outside [0, {k})",
                {"labels": bad, "num_classes": k},
            )
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (preds.true_labels, preds.predicted_labels), 1)
    names = preds.class_names if len(preds.class_names) == k else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


def precision(cm: ConfusionMatrix, c: ClassRef) -> float:
    """TP / (TP + FP)."""
    i = _index(c)
    return _ratio(cm.tp[i], cm.tp[i] + cm.fp[i])


def recall(cm: ConfusionMatrix, c: ClassRef) -> float:
    """TP / (TP + FN)."""
    i = _index(c)
    return _ratio(cm.tp[i], cm.tp[i] + cm.fn[i])


def f1(cm: ConfusionMatrix, c: ClassRef) -> float:
    """Harmonic mean of precision and recall."""
    p = precision(cm, c)
    r = recall(cm, c)
    return _ratio(2.0 * p * r, p + r)


def accuracy(cm: ConfusionMatrix) -> float:
    """trace / total."""
    return _ratio(np.trace(cm.counts), cm.total)


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    """Per-class precision, recall, F1 and support with macro and weighted averages."""
    classes = [
        ClassMetrics(
            name=name,
            precision=precision(cm, i),
            recall=recall(cm, i),
            f1=f1(cm, i),
            support=int(cm.supports[i]),
        )
        for i, name in enumerate(cm.class_names)
    ]
    total = cm.total
    k = len(classes)

    def macro(field: str) -> float:
        return sum(getattr(m, field) for m in classes) / k

    def weighted(field: str) -> float:
        return _ratio(sum(getattr(m, field) * m.support for m in classes), total)

    return ClassificationReport(
        classes=classes,
        accuracy=accuracy(cm),
        macro_avg=ClassMetrics(
            name="macro avg",
            precision=macro("precision"),
            recall=macro("recall"),
            f1=macro("f1"),
            support=total,
        ),
        weighted_avg=ClassMetrics(
            name="weighted avg",
            precision=weighted("precision"),
            recall=weighted("recall"),
            f1=weighted("f1"),
            support=total,
        ),
        total=total,
    )


def format_metric(value: float) -> str:
    """Two-decimal fixed point, half-up (0.965 -> '0.97')."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_report(report: ClassificationReport) -> str:
    """Fixed-width text table: precision, recall, f1-score and support per row."""
    names = [m.name for m in report.classes] + ["weighted avg"]
    width = max(len(n) for n in names)
    header = f"{'':>{width}} {'precision':>10} {'recall':>9} {'f1-score':>9} {'support':>9}"
    lines = [header, ""]

    def row(m: ClassMetrics) -> str:
        return (
            f"{m.name:>{width}} {format_metric(m.precision):>10} {format_metric(m.recall):>9} "
            f"{format_metric(m.f1):>9} {m.support:>9}"
        )

    lines += [row(m) for m in report.classes]
    lines.append("")
    lines.append(
        f"{'accuracy':>{width}} {'':>10} {'':>9} {format_metric(report.accuracy):>9} {report.total:>9}"
    )
    lines.append(row(report.macro_avg))
    lines.append(row(report.weighted_avg))
    return "\n".join(lines) + "\n"


def roc_curve(preds: PredictionSet, c: ClassRef) -> RocCurve:
    """One-vs-rest ROC for class ``c`` scored by its predicted probability.

    Thresholds run over the distinct scores in descending order; samples
    sharing a score move together. The polyline starts at (0, 0) with an
    infinite threshold and ends at (1, 1). AUC is the trapezoid sum.

    Raises:
        RocUndefinedError: if the class has no positive or no negative sample
    """
    i = _index(c)
    name = preds.class_names[i]
    positives = preds.true_labels == i
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise RocUndefinedError(
            f"ROC undefined for class '{name}': {n_pos} positives, {n_neg} negatives", name
        )

    scores = preds.probabilities[:, i]
    order = np.argsort(scores, kind="mergesort")[::-1]
    scores = scores[order]
    hits = positives[order].astype(np.int64)

    last_of_group = np.r_[np.where(np.diff(scores))[0], len(scores) - 1]
    tps = np.cumsum(hits)[last_of_group]
    fps = (last_of_group + 1) - tps

    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, scores[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    return RocCurve(
        class_name=name,
        class_id=i,
        thresholds=[float(t) for t in thresholds],
        fpr=[float(v) for v in fpr],
        tpr=[float(v) for v in tpr],
        auc=auc,
    )


def roc_curves(preds: PredictionSet, classes: Optional[Sequence[ClassRef]] = None) -> List[RocCurve]:
    """ROC for every class that has both positives and negatives; others are skipped with a warning."""
    refs = list(range(preds.num_classes)) if classes is None else list(classes)
    curves = []
    for c in refs:
        try:
            curves.append(roc_curve(preds, c))
        except RocUndefinedError as e:
            logger.warning("Skipping ROC: %s", e.message)
    return curves


def pairwise_auc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """P(score+ > score-) + 0.5 * P(score+ == score-) over all pairs."""
    pos = np.asarray(positive_scores, dtype=np.float64)[:, None]
    neg = np.asarray(negative_scores, dtype=np.float64)[None, :]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("pairwise_auc needs at least one positive and one negative score")
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size))


def report_to_dict(report: ClassificationReport, cm: ConfusionMatrix) -> Dict[str, object]:
    """Machine-readable evaluation record at full precision."""
    return {
        "class_names": list(cm.class_names),
        "confusion_matrix": cm.counts.tolist(),
        "report": report.to_dict(),
    }
