"""Static PNG figures: snapshot grids, loss and learning curves, confusion matrices, ROC."""

import math
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from torchvision.utils import make_grid  # noqa: E402

from cxr_augment.artifacts import atomic_write  # noqa: E402
from cxr_augment.data import save_png  # noqa: E402
from cxr_augment.models.classifier import LearningCurve  # noqa: E402
from cxr_augment.models.metrics import ConfusionMatrix, RocCurve  # noqa: E402

PathLike = Union[str, Path]

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 100,
}
mpl.rcParams.update(STYLE)


def _figure(width: float = 6.0, ncols: int = 1):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    return plt.subplots(ncols=ncols, figsize=(width * ncols, width * golden_ratio))


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    with atomic_write(path, "wb") as handle:
        fig.savefig(handle, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def save_image_grid(images: torch.Tensor, path: PathLike, nrow: int = 4) -> Path:
    """Tile a B x C x H x W batch in [-1, 1] into one 8-bit PNG (grayscale for C = 1)."""
    grid = make_grid(images.detach().cpu(), nrow=nrow, padding=2, pad_value=-1.0)
    if images.shape[1] == 1:
        grid = grid[:1]
    return save_png(grid, path)


def plot_losses(rows: Sequence[Mapping[str, float]], path: PathLike) -> Path:
    """Generator and critic loss against generator step."""
    steps = [r["step"] for r in rows]
    fig, ax = _figure()
    ax.plot(steps, [r["generator_loss"] for r in rows], label="Generator")
    ax.plot(steps, [r["critic_loss"] for r in rows], label="Critic")
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.set_title("Generator and Critic Loss")
    ax.legend()
    return _save(fig, path)


def plot_learning_curve(curve: LearningCurve, loss_path: PathLike, accuracy_path: PathLike) -> List[Path]:
    """Dual-curve PNGs: train/validation loss and train/validation accuracy."""
    epochs = [r.epoch for r in curve.epochs]
    written = []
    for path, key, label in (
        (loss_path, "loss", "Loss"),
        (accuracy_path, "accuracy", "Accuracy"),
    ):
        fig, ax = _figure()
        ax.plot(epochs, [getattr(r, f"train_{key}") for r in curve.epochs], marker="o", label="Training")
        ax.plot(epochs, [getattr(r, f"validation_{key}") for r in curve.epochs], marker="o", label="Validation")
        ax.set_xlabel("Epoch")
        ax.set_ylabel(label)
        ax.set_title(f"Training and Validation {label}")
        ax.legend()
        written.append(_save(fig, path))
    return written


def plot_confusion_matrix(cm: ConfusionMatrix, path: PathLike, title: str = "Confusion Matrix") -> Path:
    fig, ax = _figure(width=5.0)
    counts = cm.counts
    im = ax.imshow(counts, cmap="Blues")
    ax.grid(False)
    ticks = np.arange(cm.num_classes)
    ax.set_xticks(ticks, labels=cm.class_names, rotation=30, ha="right")
    ax.set_yticks(ticks, labels=cm.class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Actual")
    ax.set_title(title)
    threshold = counts.max() / 2.0 if counts.size else 0
    for i in range(cm.num_classes):
        for j in range(cm.num_classes):
            ax.text(
                j,
                i,
                str(counts[i, j]),
                ha="center",
                va="center",
                color="white" if counts[i, j] > threshold else "black",
            )
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_roc(curve: RocCurve, path: PathLike) -> Path:
    fig, ax = _figure(width=5.0)
    ax.plot(curve.fpr, curve.tpr, label=f"{curve.class_name} (AUC = {curve.auc:.2f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=1)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("False Positive Rate")
    ax.set_ylabel("True Positive Rate")
    ax.set_title(f"ROC: {curve.class_name}")
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_class_distribution(
    counts: Mapping[str, Dict[str, int]], path: PathLike, title: str = "Images per class"
) -> Path:
    """Grouped bars, one group per class, one bar per split (e.g. train and test)."""
    splits = list(counts)
    classes = list(next(iter(counts.values()))) if counts else []
    x = np.arange(len(classes))
    width = 0.8 / max(len(splits), 1)
    fig, ax = _figure()
    for i, split_name in enumerate(splits):
        values = [counts[split_name].get(c, 0) for c in classes]
        bars = ax.bar(x + i * width, values, width, label=split_name)
        ax.bar_label(bars, fontsize=7)
    ax.set_xticks(x + width * (len(splits) - 1) / 2, labels=classes)
    ax.set_ylabel("Images")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)
