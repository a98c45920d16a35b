"""
Pipeline subcommands.

Each ``cmd_*`` function takes a validated ``PipelineConfig``, reads the
artifacts of earlier stages from the output tree, writes its own and
records them in the run manifest::

    <output>/prepared/{train,test}/<Class>/*.png, counts.csv
    <output>/gan/<Class>/{checkpoints,snapshots,generators}/, losses.csv
    <output>/synthetic/<Class>/*.png
    <output>/models/<backbone>/model.pt, learning_curve.csv
    <output>/eval/<backbone>/metrics.json, report.txt; eval/summary.csv
"""

import logging
import math
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from cxr_augment import plotting
from cxr_augment.artifacts import (
    read_csv,
    sha256_tree,
    update_manifest,
    write_csv,
    write_json,
    write_text,
)
from cxr_augment.classifier import (
    build_from_config,
    load_classifier,
    predict,
    save_classifier,
    summarize_classifier,
    train_classifier,
)
from cxr_augment.config import (
    CLASSIFIER_IMAGE_SIZE,
    EvaluationSource,
    PipelineConfig,
    TrainSource,
)
from cxr_augment.data import (
    expand_dataset,
    filter_metadata,
    ingest_with_report,
    split,
    write_dataset_tree,
)
from cxr_augment.exceptions import ConfigurationError, MissingArtifactError
from cxr_augment.gan_trainer import (
    generate,
    load_checkpoint,
    load_critic,
    load_generator,
    score_images,
    select_images,
    train,
)
from cxr_augment.metrics import (
    classification_report,
    confusion_matrix,
    render_report,
    report_to_dict,
    roc_curves,
)
from cxr_augment.models.classifier import BackboneId
from cxr_augment.models.gan import SelectionStrategy
from cxr_augment.models.labels import ClassLabel, label_by_name, make_labels
from cxr_augment.models.sample import DatasetRole, ImageSample, LabeledDataset, SampleSource

logger = logging.getLogger("cxr-pipeline")

SUMMARY_COLUMNS = ["backbone", "training_accuracy", "testing_accuracy", "validation_accuracy"]
CURVE_COLUMNS = ["epoch", "train_loss", "validation_loss", "train_accuracy", "validation_accuracy"]
CLASSIFIER_SHAPE = (3, CLASSIFIER_IMAGE_SIZE, CLASSIFIER_IMAGE_SIZE)


class OutputLayout:
    """Paths of the output tree."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    @property
    def prepared(self) -> Path:
        return self.root / "prepared"

    @property
    def prepared_train(self) -> Path:
        return self.prepared / "train"

    @property
    def prepared_test(self) -> Path:
        return self.prepared / "test"

    def gan(self, class_name: str) -> Path:
        return self.root / "gan" / class_name

    @property
    def synthetic(self) -> Path:
        return self.root / "synthetic"

    def model(self, backbone: BackboneId) -> Path:
        return self.root / "models" / backbone.value.lower()

    @property
    def eval(self) -> Path:
        return self.root / "eval"

    def evaluation(self, backbone: BackboneId) -> Path:
        return self.eval / backbone.value.lower()


def _seeds(cfg: PipelineConfig) -> Dict[str, int]:
    return {
        "gan": cfg.gan.seed,
        "classifier": cfg.classifier.seed,
        "split": cfg.split.seed,
        "generation": cfg.generation_seed,
    }


def _record(cfg: PipelineConfig, command: str, paths: Sequence[Path], checksums=None) -> None:
    update_manifest(
        cfg.output_root, command, list(paths), cfg.fingerprint(), _seeds(cfg), checksums
    )


def _files_under(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and not p.name.startswith("."))


def _reset_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _selected_classes(cfg: PipelineConfig, class_name: Optional[str]) -> List[ClassLabel]:
    labels = make_labels(cfg.class_names)
    if class_name is None:
        return labels
    return [label_by_name(labels, class_name)]


def _load_tree(
    root: Path,
    labels: Sequence[ClassLabel],
    shape,
    role: DatasetRole,
    source: SampleSource = SampleSource.REAL,
) -> LabeledDataset:
    if not root.is_dir():
        raise MissingArtifactError(f"Missing artifact directory {root}", {"path": str(root)})
    dataset, _ = ingest_with_report(root, labels, shape, role, source=source)
    return dataset


def _counts_rows(columns: Dict[str, Dict[str, int]], class_names: List[str]) -> List[Dict[str, Any]]:
    rows = [{"class": name, **{k: v.get(name, 0) for k, v in columns.items()}} for name in class_names]
    rows.append({"class": "Total", **{k: sum(v.values()) for k, v in columns.items()}})
    return rows


# prepare


def cmd_prepare(cfg: PipelineConfig, n_jobs: int = 1) -> Dict[str, Dict[str, int]]:
    """Ingest the real corpus into normalized train/test trees and a counts table.

    Returns:
        Per-class counts keyed by split (``train`` and, with a test root, ``test``)
    """
    layout = OutputLayout(cfg.output_root)
    labels = make_labels(cfg.class_names)
    allowed = None
    if cfg.metadata_csv is not None:
        allowed = filter_metadata(
            cfg.metadata_csv,
            cfg.metadata_view_column,
            cfg.metadata_view_value,
            cfg.metadata_filename_column,
        )
        logger.info("Metadata filter %s=%s kept %d files", cfg.metadata_view_column, cfg.metadata_view_value, len(allowed))

    size = cfg.gan.image_size
    train_set, train_report = ingest_with_report(
        cfg.real_root, labels, (1, size, size), DatasetRole.TRAIN, allowed, n_jobs=n_jobs
    )
    counts = {"train": train_report.counts}
    skipped = {"train": train_report.skipped}
    checksums = {"real_root": sha256_tree(cfg.real_root)}

    written = write_dataset_tree(train_set, _reset_dir(layout.prepared_train))
    if cfg.test_root is not None:
        test_set, test_report = ingest_with_report(
            cfg.test_root, labels, CLASSIFIER_SHAPE, DatasetRole.TEST, n_jobs=n_jobs
        )
        counts["test"] = test_report.counts
        skipped["test"] = test_report.skipped
        checksums["test_root"] = sha256_tree(cfg.test_root)
        written += write_dataset_tree(test_set, _reset_dir(layout.prepared_test))

    written.append(write_csv(_counts_rows(counts, cfg.class_names), layout.prepared / "counts.csv"))
    written.append(write_json({"counts": counts, "skipped": skipped}, layout.prepared / "ingest_report.json"))
    written.append(plotting.plot_class_distribution(counts, layout.prepared / "class_distribution.png"))
    _record(cfg, "prepare", written, checksums)
    return counts


# train-gan


def _train_one_class(cfg: PipelineConfig, label: ClassLabel, resume: Optional[Path]) -> Dict[str, Any]:
    layout = OutputLayout(cfg.output_root)
    gan_cfg = cfg.gan_for(label.name)
    size = gan_cfg.image_size
    data = _load_tree(
        layout.prepared_train, [label], (gan_cfg.critic.in_channels, size, size), DatasetRole.TRAIN
    )
    if len(data) == 0:
        raise MissingArtifactError(
            f"No prepared images for class {label.name}", {"class": label.name}
        )
    out = layout.gan(label.name)
    checkpoint = None
    if resume is not None:
        checkpoint = load_checkpoint(resume)
    else:
        _reset_dir(out)
    _, record, _ = train(data, gan_cfg, checkpoint, out)
    return {
        "class": label.name,
        "generator_updates": record.generator_updates,
        "critic_updates": record.critic_updates,
    }


def cmd_train_gan(
    cfg: PipelineConfig,
    class_name: Optional[str] = None,
    resume: Optional[Path] = None,
    parallel: bool = False,
) -> List[Dict[str, Any]]:
    """Train one WGAN-GP per class (or only ``class_name``).

    Raises:
        ConfigurationError: if ``resume`` is given without a single class
        MissingArtifactError: if the prepared tree is absent
        FingerprintMismatchError: if the resume checkpoint belongs to another config
    """
    labels = _selected_classes(cfg, class_name)
    if resume is not None and len(labels) != 1:
        raise ConfigurationError("--resume needs --class to name the run it continues")
    layout = OutputLayout(cfg.output_root)

    if parallel and len(labels) > 1:
        logger.info("Training %d class GANs in parallel", len(labels))
        results = Parallel(n_jobs=len(labels), backend="loky")(
            delayed(_train_one_class)(cfg, label, None) for label in labels
        )
    else:
        results = [_train_one_class(cfg, label, resume) for label in labels]

    written = []
    for label in labels:
        written += _files_under(layout.gan(label.name))
    _record(cfg, "train-gan", written)
    return results


# generate


def _snapshot_paths(gan_dir: Path) -> List[Path]:
    snapshots = sorted(
        (gan_dir / "generators").glob("epoch_*.pt"),
        key=lambda p: int(p.stem.split("_")[1]),
    )
    if snapshots:
        return snapshots
    final = gan_dir / "generator.pt"
    if final.is_file():
        return [final]
    raise MissingArtifactError(f"No trained generator under {gan_dir}", {"path": str(gan_dir)})


def _seed_for(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def generate_selected(
    cfg: PipelineConfig, label: ClassLabel, n: int, seed: int
) -> List[ImageSample]:
    """Generate a pool of ``pool_factor * n`` images over the retained snapshots and keep ``n``.

    Selection is applied chunk by chunk, so the whole pool is never held in
    memory; both strategies keep the same images as a one-shot selection.
    """
    gan_dir = OutputLayout(cfg.output_root).gan(label.name)
    snapshots = _snapshot_paths(gan_dir)
    if n == 0:
        return []
    strategy = cfg.selection_strategy
    critic = load_critic(gan_dir / "critic.pt") if strategy == SelectionStrategy.CRITIC_SCORE else None

    per_snapshot = math.ceil(cfg.pool_factor * n / len(snapshots))
    kept: List[ImageSample] = []
    for path in snapshots:
        generator, epoch = load_generator(path)
        generator.label = label
        chunk = generate(generator, per_snapshot, _seed_for(seed, label.id, epoch), epoch=epoch)
        if critic is not None:
            chunk = score_images(critic, chunk)
        merged = kept + chunk
        kept = select_images(merged, min(n, len(merged)), strategy)
    logger.info(
        "Selected %d of %d %s images from %d snapshots (%s)",
        len(kept),
        per_snapshot * len(snapshots),
        label.name,
        len(snapshots),
        strategy.value,
    )
    return kept


def cmd_generate(
    cfg: PipelineConfig,
    class_name: Optional[str] = None,
    n: Optional[int] = None,
    seed: Optional[int] = None,
) -> Dict[str, int]:
    """Write the selected synthetic images per class under ``synthetic/<Class>/``.

    Raises:
        MissingArtifactError: if a class has no trained generator
    """
    layout = OutputLayout(cfg.output_root)
    seed = cfg.generation_seed if seed is None else seed
    labels = _selected_classes(cfg, class_name)
    counts = {}
    written = []
    for label in labels:
        count = cfg.generation_count(label.name) if n is None else n
        if count < 0:
            raise ConfigurationError(f"Generation count must be >= 0, got {count}")
        images = generate_selected(cfg, label, count, seed)
        out = _reset_dir(layout.synthetic / label.name)
        written += write_dataset_tree(LabeledDataset(images, [label]), layout.synthetic)
        counts[label.name] = len(images)
        logger.info("Wrote %d synthetic %s images to %s", len(images), label.name, out)
    _record(cfg, "generate", written)
    return counts


# train-clf


def training_pool(cfg: PipelineConfig) -> LabeledDataset:
    """Classifier training pool for ``cfg.train_source``."""
    layout = OutputLayout(cfg.output_root)
    labels = make_labels(cfg.class_names)
    size = cfg.gan.image_size
    real = synthetic = None
    if cfg.train_source in (TrainSource.REAL, TrainSource.BOTH):
        real = _load_tree(layout.prepared_train, labels, (1, size, size), DatasetRole.TRAIN)
    if cfg.train_source in (TrainSource.SYNTHETIC, TrainSource.BOTH):
        synthetic = _load_tree(
            layout.synthetic, labels, (1, size, size), DatasetRole.TRAIN, SampleSource.SYNTHETIC
        )
    pool = expand_dataset(real, synthetic)
    if len(pool) == 0:
        raise MissingArtifactError(
            f"Training pool for source {cfg.train_source.value} is empty",
            {"train_source": cfg.train_source.value},
        )
    return pool


def cmd_train_clf(
    cfg: PipelineConfig,
    backbone: BackboneId,
    device: str = "cpu",
    cache_dir: Optional[Path] = None,
) -> Dict[str, Any]:
    """Train one backbone on the expanded dataset and write its model and curves."""
    layout = OutputLayout(cfg.output_root)
    clf_cfg = cfg.classifier_for(backbone)
    pool = training_pool(cfg)
    train_set, validation_set = split(pool, cfg.split)

    model = build_from_config(clf_cfg, cfg.class_names, cache_dir)
    summary = summarize_classifier(model)
    model, curve = train_classifier(model, train_set, validation_set, clf_cfg, device=device)

    out = layout.model(backbone)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        save_classifier(model, out / "model.pt", clf_cfg.fingerprint()),
        write_csv(curve.rows(), out / "learning_curve.csv", columns=CURVE_COLUMNS),
        write_json(summary.to_dict(), out / "summary.json"),
        write_text(summary.render(), out / "summary.txt"),
        write_json(
            {
                "train": train_set.counts(),
                "validation": validation_set.counts(),
                "train_origins": train_set.origins(),
                "validation_origins": validation_set.origins(),
            },
            out / "split.json",
        ),
        plotting.plot_class_distribution(
            {"train": train_set.counts(), "validation": validation_set.counts()},
            out / "class_distribution.png",
        ),
    ]
    written += plotting.plot_learning_curve(curve, out / "loss.png", out / "accuracy.png")
    _record(cfg, "train-clf", written)
    last = curve.epochs[-1]
    return {
        "backbone": backbone.value,
        "epochs": len(curve),
        "train_accuracy": last.train_accuracy,
        "validation_accuracy": last.validation_accuracy,
        "best_epoch": model.best_epoch,
    }


# evaluate


def evaluation_set(cfg: PipelineConfig) -> LabeledDataset:
    """Evaluation set for ``cfg.test_source``."""
    layout = OutputLayout(cfg.output_root)
    labels = make_labels(cfg.class_names)
    if cfg.test_source == EvaluationSource.REAL:
        if cfg.test_root is None:
            raise ConfigurationError("test_source REAL needs test_root in the config")
        return _load_tree(layout.prepared_test, labels, CLASSIFIER_SHAPE, DatasetRole.TEST)

    samples: List[ImageSample] = []
    for label in labels:
        generator, _ = load_generator(layout.gan(label.name) / "generator.pt")
        generator.label = label
        seed = _seed_for(cfg.generation_seed, label.id, -1)
        samples += [
            ImageSample(s.pixels, s.label, s.source, f"test_{s.origin}", s.epoch, s.index)
            for s in generate(generator, cfg.test_synthetic_count, seed)
        ]
    return LabeledDataset(samples, labels, DatasetRole.TEST)


def _percent(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(100.0 * value, 2)


def _update_summary(path: Path, row: Dict[str, Any]) -> Path:
    rows = []
    if path.is_file():
        rows = [r for r in read_csv(path).to_dict("records") if r["backbone"] != row["backbone"]]
    rows.append(row)
    order = [b.value for b in BackboneId]
    rows.sort(key=lambda r: order.index(r["backbone"]) if r["backbone"] in order else len(order))
    return write_csv(rows, path, columns=SUMMARY_COLUMNS)


def cmd_evaluate(
    cfg: PipelineConfig,
    backbone: BackboneId,
    weights: str = "final",
    device: str = "cpu",
) -> Dict[str, Any]:
    """Evaluate a trained backbone and write every metric artifact.

    Classes absent from the test set get no ROC curve; a warning is logged.

    Raises:
        MissingArtifactError: if the model or the test set is absent
    """
    layout = OutputLayout(cfg.output_root)
    model_dir = layout.model(backbone)
    model, _ = load_classifier(model_dir / "model.pt", weights)
    dataset = evaluation_set(cfg)
    preds = predict(model, dataset, device=device)

    cm = confusion_matrix(preds, len(cfg.class_names))
    report = classification_report(cm)
    curves = roc_curves(preds)

    out = layout.evaluation(backbone)
    out.mkdir(parents=True, exist_ok=True)
    metrics = report_to_dict(report, cm)
    metrics["backbone"] = backbone.value
    metrics["weights"] = weights
    metrics["auc"] = {c.class_name: c.auc for c in curves}
    written = [
        write_json(metrics, out / "metrics.json"),
        write_json({"counts": cm.counts.tolist(), "class_names": cm.class_names}, out / "confusion_matrix.json"),
        write_text(render_report(report), out / "report.txt"),
        plotting.plot_confusion_matrix(cm, out / "confusion_matrix.png", f"{backbone.value} Confusion Matrix"),
        write_csv(
            [
                {
                    "origin": s.origin,
                    "true": int(t),
                    "predicted": int(p),
                    **{name: float(v) for name, v in zip(cm.class_names, probs)},
                }
                for s, t, p, probs in zip(dataset, preds.true_labels, preds.predicted_labels, preds.probabilities)
            ],
            out / "predictions.csv",
        ),
    ]
    for curve in curves:
        stem = f"roc_{curve.class_name}"
        written.append(write_csv(curve.rows(), out / f"{stem}.csv", columns=["threshold", "fpr", "tpr"]))
        written.append(plotting.plot_roc(curve, out / f"{stem}.png"))

    curve_path = model_dir / "learning_curve.csv"
    train_acc = val_acc = None
    if curve_path.is_file():
        last = read_csv(curve_path).iloc[-1]
        train_acc = float(last["train_accuracy"])
        val_acc = float(last["validation_accuracy"])
    written.append(
        _update_summary(
            layout.eval / "summary.csv",
            {
                "backbone": backbone.value,
                "training_accuracy": _percent(train_acc),
                "testing_accuracy": _percent(report.accuracy),
                "validation_accuracy": _percent(val_acc),
            },
        )
    )
    _record(cfg, "evaluate", written)
    logger.info("%s test accuracy %.4f on %d images", backbone.value, report.accuracy, len(preds))
    return {"backbone": backbone.value, "accuracy": report.accuracy, "roc_classes": [c.class_name for c in curves]}
