"""
Data pipeline: ingestion, metadata filtering, normalization, splitting and augmentation.

Pixel convention: raw 8-bit values v map to v / 127.5 - 1, so every
normalized grid lies in [-1, 1]. Grids are channels x height x width.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from cxr_augment.config import AugmentationPolicy, SplitSpec
from cxr_augment.exceptions import ConfigurationError, ImageDecodeError, ShapeError
from cxr_augment.models.base import BaseModel
from cxr_augment.models.labels import ClassLabel
from cxr_augment.models.sample import (
    DatasetRole,
    ImageSample,
    LabeledDataset,
    SampleSource,
)

logger = logging.getLogger("cxr-data")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

# Full scale of wide integer grayscale modes; 16-bit PNGs decode as one of these.
WIDE_INTEGER_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}
WIDE_INTEGER_MAX = 65535.0

# ITU-R BT.601 luma weights, the same ones PIL uses for RGB -> L.
_LUMA = torch.tensor([0.299, 0.587, 0.114]).view(3, 1, 1)

Shape = Tuple[int, int, int]


class IngestReport(BaseModel):
    """Per-class counts of an ingestion pass."""

    root: str
    counts: Dict[str, int]
    skipped: Dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())


# Decoding


def decode_image(path: Union[str, Path]) -> torch.Tensor:
    """Decode an image file into a uint8 tensor of shape C x H x W (C is 1 or 3).

    Raises:
        ImageDecodeError: if the file cannot be decoded
    """
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in WIDE_INTEGER_MODES or img.mode == "F":
                array = _rescale_wide(np.asarray(img, dtype=np.float64), img.mode)
            else:
                if img.mode in ("L", "1"):
                    img = img.convert("L")
                elif img.mode != "RGB":
                    img = img.convert("RGB")
                array = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageDecodeError(f"Cannot decode image {path}: {e}", str(path))

    if array.ndim == 2:
        return torch.from_numpy(array.copy()).unsqueeze(0)
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def _rescale_wide(values: np.ndarray, mode: str) -> np.ndarray:
    """Map 16-bit or float grayscale onto 0..255, rounding half up.

    Integer modes scale by the 16-bit full range. Float images stretch their
    own min..max; a constant float image maps to 0.
    """
    if mode == "F":
        values = np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)
        low, high = float(values.min()), float(values.max())
        scaled = (values - low) / (high - low) if high > low else np.zeros_like(values)
    else:
        scaled = np.clip(values, 0.0, WIDE_INTEGER_MAX) / WIDE_INTEGER_MAX
    return np.floor(scaled * 255.0 + 0.5).astype(np.uint8)


def _list_images(directory: Path, allowed: Optional[Set[str]]) -> List[Path]:
    files = [
        p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    if allowed is not None:
        files = [p for p in files if p.stem in allowed]
    return files


def _load_one(
    path: Path, label: ClassLabel, target_shape: Shape
) -> Optional[ImageSample]:
    try:
        raw = decode_image(path)
        pixels = normalize(raw, target_shape)
    except (ImageDecodeError, ShapeError) as e:
        logger.warning("Skipping %s: %s", path, e.message)
        return None
    return ImageSample(
        pixels=pixels, label=label, source=SampleSource.REAL, origin=str(path)
    )


def ingest_with_report(
    root: Union[str, Path],
    labels: Sequence[ClassLabel],
    target_shape: Shape = (1, 128, 128),
    role: DatasetRole = DatasetRole.TRAIN,
    allowed_files: Optional[Iterable[str]] = None,
    source: SampleSource = SampleSource.REAL,
    n_jobs: int = 1,
) -> Tuple[LabeledDataset, IngestReport]:
    """Ingest ``<root>/<ClassName>/*.png|jpg`` into a normalized dataset.

    Args:
        root: Directory holding one subdirectory per class name
        labels: Registered label set; subdirectory names must match exactly
        target_shape: (channels, height, width) every sample is brought to
        role: Role recorded on the returned dataset
        allowed_files: Optional file-name whitelist (e.g. from filter_metadata), matched by stem
        source: Source tag recorded on each sample
        n_jobs: Decode files on this many threads; order is preserved

    Returns:
        The dataset and a report of per-class counts and skipped files

    Raises:
        ConfigurationError: if root or a class directory is missing
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"Data root {root} does not exist", {"path": str(root)})

    missing = [l.name for l in labels if not (root / l.name).is_dir()]
    if missing:
        raise ConfigurationError(
            f"Missing class directory {root / missing[0]}",
            {"path": str(root / missing[0]), "missing": missing},
        )

    # Metadata may name a different extension than the stored file.
    allowed = {Path(name).stem for name in allowed_files} if allowed_files is not None else None
    samples: List[ImageSample] = []
    counts: Dict[str, int] = {}
    skipped: Dict[str, int] = {}

    for label in labels:
        files = _list_images(root / label.name, allowed)
        if not files:
            logger.warning("Class directory %s holds no images", root / label.name)
        loaded = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_load_one)(path, label, target_shape) for path in files
        )
        kept = [s for s in loaded if s is not None]
        if source != SampleSource.REAL:
            kept = [
                ImageSample(s.pixels, s.label, source, s.origin, index=i)
                for i, s in enumerate(kept)
            ]
        samples.extend(kept)
        counts[label.name] = len(kept)
        skipped[label.name] = len(files) - len(kept)

    report = IngestReport(root=str(root), counts=counts, skipped=skipped)
    logger.info(
        "Ingested %d images from %s: %s",
        report.total,
        root,
        ", ".join(f"{k}={v}" for k, v in counts.items()),
    )
    if report.total_skipped:
        logger.warning("Skipped %d undecodable files under %s", report.total_skipped, root)
    return LabeledDataset(samples, labels, role), report


def ingest_directory(
    root: Union[str, Path],
    labels: Sequence[ClassLabel],
    target_shape: Shape = (1, 128, 128),
    role: DatasetRole = DatasetRole.TRAIN,
    allowed_files: Optional[Iterable[str]] = None,
) -> LabeledDataset:
    """Ingest a class-per-subdirectory image tree. See ``ingest_with_report``."""
    dataset, _ = ingest_with_report(root, labels, target_shape, role, allowed_files)
    return dataset


def filter_metadata(
    csv: Union[str, Path],
    view_column: str,
    view_value: str,
    filename_column: str = "filename",
) -> List[str]:
    """Return filenames of metadata rows whose ``view_column`` equals ``view_value``.

    Row order is preserved.

    Raises:
        ConfigurationError: if either column is absent from the header
        OSError: if the CSV cannot be read
    """
    try:
        frame = pd.read_csv(csv, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise OSError(f"Cannot read metadata CSV {csv}: {e}") from e

    for column in (view_column, filename_column):
        if column not in frame.columns:
            raise ConfigurationError(
                f"Metadata CSV {csv} has no column '{column}'",
                {"column": column, "columns": list(frame.columns)},
            )

    selected = frame.loc[frame[view_column] == view_value, filename_column]
    return selected.tolist()


# Pixel transforms


def reshape_pixels(pixels: torch.Tensor, target_shape: Shape) -> torch.Tensor:
    """Bring a normalized C x H x W grid to ``target_shape``.

    Grayscale to RGB replicates the channel; RGB to grayscale takes the
    luminance. Spatial resizing is bilinear.
    """
    if pixels.dim() == 2:
        pixels = pixels.unsqueeze(0)
    if pixels.dim() != 3 or pixels.numel() == 0:
        raise ShapeError(f"Expected a non-empty C x H x W grid, got {tuple(pixels.shape)}")

    channels, height, width = target_shape
    src_channels = pixels.shape[0]
    if src_channels != channels:
        if src_channels == 1 and channels == 3:
            pixels = pixels.expand(3, -1, -1)
        elif src_channels == 3 and channels == 1:
            pixels = (pixels * _LUMA.to(pixels.dtype)).sum(dim=0, keepdim=True)
        else:
            raise ShapeError(
                f"Cannot convert {src_channels} channels to {channels}",
                {"source": src_channels, "target": channels},
            )

    if tuple(pixels.shape[1:]) != (height, width):
        pixels = F.interpolate(
            pixels.unsqueeze(0),
            size=(height, width),
            mode="bilinear",
            align_corners=False,
        ).squeeze(0)

    return pixels.clamp(-1.0, 1.0).contiguous()


def normalize(raw: Union[torch.Tensor, np.ndarray], target_shape: Shape) -> torch.Tensor:
    """Map an 8-bit image to [-1, 1] via v / 127.5 - 1 and resize to ``target_shape``.

    Raises:
        ShapeError: if the image is zero-sized or has an unsupported channel count
    """
    if isinstance(raw, np.ndarray):
        raw = torch.from_numpy(np.ascontiguousarray(raw))
    if raw.numel() == 0:
        raise ShapeError("Cannot normalize a zero-sized image")
    if raw.dim() == 2:
        raw = raw.unsqueeze(0)
    pixels = raw.to(torch.float32) / 127.5 - 1.0
    return reshape_pixels(pixels, target_shape)


def denormalize(pixels: torch.Tensor) -> torch.Tensor:
    """Inverse of the normalization map: round((v + 1) * 127.5) as uint8."""
    return torch.round((pixels.detach().float().cpu() + 1.0) * 127.5).clamp(0, 255).to(
        torch.uint8
    )


def resize_sample(sample: ImageSample, target_shape: Shape) -> ImageSample:
    """Return ``sample`` brought to ``target_shape`` (e.g. 1x128x128 -> 3x224x224)."""
    if sample.shape == tuple(target_shape):
        return sample
    return sample.with_pixels(reshape_pixels(sample.pixels, target_shape))


def resize_dataset(dataset: LabeledDataset, target_shape: Shape) -> LabeledDataset:
    return dataset.map(lambda s: resize_sample(s, target_shape))


# Split and augmentation


def split(pool: LabeledDataset, spec: SplitSpec) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded uniform random partition into train and validation subsets.

    The validation subset holds round(validation_fraction * |pool|) samples
    (half rounds up); both subsets keep the pool order.

    Raises:
        ConfigurationError: if the fraction is outside (0, 1) or yields an empty side
    """
    fraction = spec.validation_fraction
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(
            f"validation_fraction must lie in (0, 1), got {fraction}",
            {"validation_fraction": fraction},
        )
    n = len(pool)
    n_val = int(math.floor(fraction * n + 0.5))
    if n_val < 1 or n_val >= n:
        raise ConfigurationError(
            f"Cannot hold out {fraction:.2f} of a pool of {n} samples",
            {"pool_size": n, "validation_fraction": fraction},
        )

    order = np.random.default_rng(spec.seed).permutation(n)
    val_idx = sorted(int(i) for i in order[:n_val])
    train_idx = sorted(int(i) for i in order[n_val:])

    train = pool.select(train_idx).with_role(DatasetRole.TRAIN)
    validation = pool.select(val_idx).with_role(DatasetRole.VALIDATION)
    logger.info("Split %d samples into %d train / %d validation", n, len(train), len(validation))
    return train, validation


def augment(
    sample: ImageSample, policy: AugmentationPolicy, rng: np.random.Generator
) -> ImageSample:
    """Random horizontal flip, then pad with -1, then random crop to ``policy.crop_size``.

    Draw order from ``rng``: flip, crop top, crop left.

    Raises:
        ConfigurationError: if the crop does not fit in the padded image
    """
    pixels = sample.pixels
    _, height, width = pixels.shape
    pad = policy.pad_pixels
    crop_h, crop_w = policy.crop_size
    if crop_h > height + 2 * pad or crop_w > width + 2 * pad:
        raise ConfigurationError(
            f"Crop {crop_h}x{crop_w} does not fit padded image "
            f"{height + 2 * pad}x{width + 2 * pad}",
            {"crop_size": [crop_h, crop_w], "pad_pixels": pad},
        )

    if rng.random() < policy.horizontal_flip_probability:
        pixels = torch.flip(pixels, dims=[2])
    if pad:
        pixels = F.pad(pixels, (pad, pad, pad, pad), mode="constant", value=-1.0)

    top = int(rng.integers(0, height + 2 * pad - crop_h + 1))
    left = int(rng.integers(0, width + 2 * pad - crop_w + 1))
    pixels = pixels[:, top : top + crop_h, left : left + crop_w].contiguous()
    return sample.with_pixels(pixels)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample RNG so augmentation is reproducible regardless of worker count."""
    return np.random.default_rng([seed, epoch, index])


class SampleDataset(Dataset):
    """Torch view of a LabeledDataset yielding (pixels, label id) pairs."""

    def __init__(
        self,
        dataset: LabeledDataset,
        target_shape: Optional[Shape] = None,
        policy: Optional[AugmentationPolicy] = None,
        seed: int = 0,
    ) -> None:
        self.dataset = dataset
        self.target_shape = target_shape
        self.policy = policy
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, idx: int) -> Tuple[torch.Tensor, int]:
        sample = self.dataset[idx]
        if self.target_shape is not None:
            sample = resize_sample(sample, self.target_shape)
        if self.policy is not None:
            sample = augment(sample, self.policy, sample_rng(self.seed, self.epoch, idx))
        return sample.pixels, sample.label.id


def expand_dataset(
    real: Optional[LabeledDataset],
    synthetic: Optional[LabeledDataset],
    target_shape: Optional[Shape] = None,
) -> LabeledDataset:
    """Merge real and synthetic samples into one training pool.

    With ``target_shape`` every sample is resized up front (e.g. 1x128x128
    GAN output to 3x224x224); otherwise resizing is left to the loader.

    Raises:
        ConfigurationError: if both inputs are None or their label sets differ
    """
    parts = [d for d in (real, synthetic) if d is not None]
    if not parts:
        raise ConfigurationError("Nothing to expand: no real and no synthetic samples")
    pool = parts[0]
    for part in parts[1:]:
        pool = pool.concat(part)
    pool = pool.with_role(DatasetRole.TRAIN)
    if target_shape is not None:
        pool = resize_dataset(pool, target_shape)
    logger.info(
        "Expanded training pool: %s (total %d)",
        ", ".join(f"{k}={v}" for k, v in pool.counts().items()),
        len(pool),
    )
    return pool


def stack_pixels(dataset: LabeledDataset) -> torch.Tensor:
    """Stack every sample into one B x C x H x W tensor."""
    if len(dataset) == 0:
        raise ShapeError("Cannot stack an empty dataset")
    return torch.stack([s.pixels for s in dataset])


# Writing


def save_png(pixels: torch.Tensor, path: Union[str, Path]) -> Path:
    """Write a normalized 1- or 3-channel grid as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = denormalize(pixels).numpy()
    if array.shape[0] == 1:
        image = Image.fromarray(array[0])
    else:
        image = Image.fromarray(np.ascontiguousarray(np.transpose(array, (1, 2, 0))))
    image.save(path, format="PNG")
    return path


def write_dataset_tree(dataset: LabeledDataset, root: Union[str, Path]) -> List[Path]:
    """Write ``<root>/<ClassName>/<stem>.png`` for every sample; returns written paths."""
    root = Path(root)
    written = []
    for label in dataset.labels:
        (root / label.name).mkdir(parents=True, exist_ok=True)
    for position, sample in enumerate(dataset):
        stem = Path(sample.origin).stem if sample.origin else f"sample_{position:06d}"
        written.append(save_png(sample.pixels, root / sample.label.name / f"{stem}.png"))
    return written
