"""
Tests for ingestion, normalization, splitting and augmentation.
"""

import logging

import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError

try:
    import pytest
except ImportError:
    pass

from cxr_augment.config import AugmentationPolicy, SplitSpec
from cxr_augment.data import (
    _rescale_wide,
    augment,
    decode_image,
    denormalize,
    expand_dataset,
    filter_metadata,
    ingest_directory,
    ingest_with_report,
    normalize,
    save_png,
    split,
    write_dataset_tree,
)
from cxr_augment.exceptions import ConfigurationError, ShapeError
from cxr_augment.models.labels import make_labels
from cxr_augment.models.sample import (
    DatasetRole,
    ImageSample,
    LabeledDataset,
    SampleSource,
)

logger = logging.getLogger("cxr-tests")


def _pool(n: int, labels) -> LabeledDataset:
    samples = [
        ImageSample(torch.zeros(1, 1, 1), labels[i % len(labels)], origin=f"s{i}")
        for i in range(n)
    ]
    return LabeledDataset(samples, labels)


class TestIngest:
    """Directory ingestion."""

    @pytest.fixture(scope="class")
    def labels(self):
        return make_labels()

    def test_counts_per_class(self, labels, make_corpus) -> None:
        """A 59/164/152 tree yields 375 samples with matching per-class counts."""
        root = make_corpus(counts={"COVID-19": 59, "NORMAL": 164, "VIRAL_PNEUMONIA": 152}, size=8)
        dataset, report = ingest_with_report(root, labels, target_shape=(1, 8, 8))
        assert len(dataset) == 375
        assert dataset.counts() == {"COVID-19": 59, "NORMAL": 164, "VIRAL_PNEUMONIA": 152}
        assert report.total == sum(dataset.counts().values())
        assert all(s.source == SampleSource.REAL for s in dataset)

    def test_resizes_to_target(self, labels, make_corpus) -> None:
        """Every sample has the requested shape and stays in [-1, 1]."""
        root = make_corpus(size=20, mode="RGB")
        dataset = ingest_directory(root, labels, target_shape=(1, 16, 16))
        for sample in dataset:
            assert sample.shape == (1, 16, 16)
            assert sample.pixels.min() >= -1.0
            assert sample.pixels.max() <= 1.0

    def test_empty_class_directory(self, labels, make_corpus, caplog) -> None:
        """An empty class directory yields zero samples and a warning."""
        root = make_corpus(counts={"COVID-19": 3, "NORMAL": 0, "VIRAL_PNEUMONIA": 2})
        (root / "NORMAL").mkdir(exist_ok=True)
        with caplog.at_level(logging.WARNING, logger="cxr-data"):
            dataset = ingest_directory(root, labels, target_shape=(1, 16, 16))
        assert dataset.counts()["NORMAL"] == 0
        assert len(dataset) == 5
        assert any("NORMAL" in r.getMessage() for r in caplog.records)

    def test_missing_class_directory(self, labels, make_corpus) -> None:
        """A missing class directory is a configuration error naming it."""
        root = make_corpus(counts={"COVID-19": 2, "NORMAL": 2})
        with pytest.raises(ConfigurationError) as exc_info:
            ingest_directory(root, labels, target_shape=(1, 16, 16))
        assert "VIRAL_PNEUMONIA" in exc_info.value.message

    def test_undecodable_file_skipped(self, labels, make_corpus) -> None:
        """Broken files are skipped and counted."""
        root = make_corpus(counts={c: 2 for c in ("COVID-19", "NORMAL", "VIRAL_PNEUMONIA")})
        (root / "NORMAL" / "broken.png").write_bytes(b"not an image")
        dataset, report = ingest_with_report(root, labels, target_shape=(1, 16, 16))
        assert len(dataset) == 6
        assert report.skipped["NORMAL"] == 1
        assert report.total_skipped == 1

    def test_allowed_files_whitelist(self, labels, make_corpus) -> None:
        root = make_corpus()
        dataset = ingest_directory(root, labels, (1, 16, 16), allowed_files=["img_000.png"])
        assert dataset.counts() == {"COVID-19": 1, "NORMAL": 1, "VIRAL_PNEUMONIA": 1}

    def test_whitelist_matches_by_stem(self, labels, make_corpus) -> None:
        """Metadata naming a .jpg still selects the stored .png."""
        root = make_corpus()
        dataset = ingest_directory(
            root, labels, (1, 16, 16), allowed_files=["img_001.jpg", "images/img_002.jpeg"]
        )
        assert dataset.counts() == {"COVID-19": 2, "NORMAL": 2, "VIRAL_PNEUMONIA": 2}
        assert sorted({o.rsplit("/", 1)[-1] for o in dataset.origins()}) == ["img_001.png", "img_002.png"]

    def test_parallel_decode_keeps_order(self, labels, make_corpus) -> None:
        root = make_corpus()
        serial, _ = ingest_with_report(root, labels, (1, 16, 16))
        threaded, _ = ingest_with_report(root, labels, (1, 16, 16), n_jobs=3)
        assert serial.origins() == threaded.origins()


class TestFilterMetadata:
    """View filtering from a metadata CSV."""

    @pytest.fixture
    def csv_path(self, tmp_path):
        path = tmp_path / "metadata.csv"
        path.write_text("filename,view\na.png,AP\nb.png,PA\nc.png,AP\n", encoding="utf-8")
        return path

    def test_filters_in_row_order(self, csv_path) -> None:
        assert filter_metadata(csv_path, "view", "AP") == ["a.png", "c.png"]

    def test_no_match(self, csv_path) -> None:
        assert filter_metadata(csv_path, "view", "LATERAL") == []

    def test_missing_column(self, csv_path) -> None:
        """The error names the absent column."""
        with pytest.raises(ConfigurationError) as exc_info:
            filter_metadata(csv_path, "projection", "AP")
        assert "projection" in exc_info.value.message

    def test_unreadable_csv(self, tmp_path) -> None:
        with pytest.raises(OSError):
            filter_metadata(tmp_path / "absent.csv", "view", "AP")


class TestNormalize:
    """Pixel normalization."""

    def test_endpoints(self) -> None:
        raw = torch.tensor([[[0, 255, 128]]], dtype=torch.uint8)
        pixels = normalize(raw, (1, 1, 3))
        assert pixels[0, 0, 0].item() == -1.0
        assert pixels[0, 0, 1].item() == 1.0
        assert pixels[0, 0, 2].item() == pytest.approx(128 / 127.5 - 1, abs=1e-7)

    def test_round_trip_all_byte_values(self) -> None:
        """denormalize(normalize(v)) == v for every byte."""
        raw = torch.arange(256, dtype=torch.uint8).view(1, 16, 16)
        assert torch.equal(denormalize(normalize(raw, (1, 16, 16))), raw)

    def test_grayscale_to_rgb_replicates(self) -> None:
        raw = np.random.default_rng(0).integers(0, 256, (128, 128), dtype=np.uint8)
        pixels = normalize(raw, (3, 224, 224))
        assert pixels.shape == (3, 224, 224)
        assert torch.equal(pixels[0], pixels[1])
        assert torch.equal(pixels[1], pixels[2])

    def test_rgb_to_grayscale_uses_luminance(self) -> None:
        raw = torch.zeros(3, 2, 2, dtype=torch.uint8)
        raw[1] = 255
        pixels = normalize(raw, (1, 2, 2))
        assert pixels.shape == (1, 2, 2)
        expected = 0.587 * 1.0 + (0.299 + 0.114) * -1.0
        assert pixels[0, 0, 0].item() == pytest.approx(expected, abs=1e-6)

    def test_zero_sized_image(self) -> None:
        with pytest.raises(ShapeError):
            normalize(torch.zeros(1, 0, 5, dtype=torch.uint8), (1, 8, 8))

    def test_png_round_trip(self, tmp_path) -> None:
        """Saving and decoding a normalized grid returns the same bytes."""
        raw = torch.arange(256, dtype=torch.uint8).view(1, 16, 16)
        path = save_png(normalize(raw, (1, 16, 16)), tmp_path / "grid.png")
        assert torch.equal(decode_image(path), raw)

    def test_sixteen_bit_gradient_keeps_detail(self, tmp_path) -> None:
        """A 16-bit gradient is rescaled onto 0..255 rather than clipped."""
        wide = np.linspace(0, 65535, 64).round().astype(np.uint16).reshape(8, 8)
        path = tmp_path / "wide.png"
        Image.fromarray(wide).save(path)
        decoded = decode_image(path)
        expected = np.floor(wide.astype(np.float64) / 65535.0 * 255.0 + 0.5).astype(np.uint8)
        assert decoded.shape == (1, 8, 8)
        assert decoded[0].numpy().tolist() == expected.tolist()
        assert len(np.unique(decoded.numpy())) > 60
        assert decoded.min().item() == 0 and decoded.max().item() == 255

    def test_float_values_stretched(self) -> None:
        """Float grayscale spans its own range; 0.25..1.25 maps to 0..255."""
        values = np.array([[0.25, 0.5], [0.75, 1.25]])
        assert _rescale_wide(values, "F").tolist() == [[0, 64], [128, 255]]
        assert _rescale_wide(np.full((2, 2), 3.0), "F").tolist() == [[0, 0], [0, 0]]


class TestSplit:
    """Seeded train/validation partition."""

    @pytest.fixture(scope="class")
    def labels(self):
        return make_labels()

    @pytest.mark.parametrize("seed", [0, 1, 7, 123])
    def test_ten_samples(self, labels, seed) -> None:
        pool = _pool(10, labels)
        train, validation = split(pool, SplitSpec(validation_fraction=0.2, seed=seed))
        assert (len(train), len(validation)) == (8, 2)
        assert set(train.origins()).isdisjoint(validation.origins())
        assert set(train.origins()) | set(validation.origins()) == set(pool.origins())
        assert train.role == DatasetRole.TRAIN
        assert validation.role == DatasetRole.VALIDATION

    def test_expanded_pool_sizes(self, labels) -> None:
        pool = _pool(12000, labels)
        train, validation = split(pool, SplitSpec(validation_fraction=0.2, seed=3))
        assert (len(train), len(validation)) == (9600, 2400)

    def test_deterministic(self, labels) -> None:
        pool = _pool(50, labels)
        spec = SplitSpec(validation_fraction=0.2, seed=11)
        first = split(pool, spec)
        second = split(pool, spec)
        assert first[1].origins() == second[1].origins()
        other = split(pool, SplitSpec(validation_fraction=0.2, seed=12))
        assert other[1].origins() != first[1].origins()

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_fraction_out_of_range(self, labels, fraction) -> None:
        spec = SplitSpec.model_construct(validation_fraction=fraction, seed=0)
        with pytest.raises(ConfigurationError):
            split(_pool(10, labels), spec)

    def test_empty_validation_side(self, labels) -> None:
        with pytest.raises(ConfigurationError):
            split(_pool(2, labels), SplitSpec(validation_fraction=0.2, seed=0))


class TestAugment:
    """Flip, pad and crop augmentation."""

    @pytest.fixture(scope="class")
    def sample(self):
        labels = make_labels()
        rng = np.random.default_rng(5)
        pixels = torch.from_numpy(rng.uniform(-1, 1, (3, 32, 32)).astype(np.float32))
        return ImageSample(pixels, labels[0])

    def test_degenerate_policy_is_identity(self, sample) -> None:
        policy = AugmentationPolicy(horizontal_flip_probability=0.0, pad_pixels=0, crop_size=(32, 32))
        out = augment(sample, policy, np.random.default_rng(0))
        assert torch.equal(out.pixels, sample.pixels)

    def test_flip_is_involution(self, sample) -> None:
        policy = AugmentationPolicy(horizontal_flip_probability=1.0, pad_pixels=0, crop_size=(32, 32))
        once = augment(sample, policy, np.random.default_rng(0))
        assert torch.equal(once.pixels, torch.flip(sample.pixels, dims=[2]))
        twice = augment(once, policy, np.random.default_rng(1))
        assert torch.equal(twice.pixels, sample.pixels)

    def test_every_crop_offset_reachable(self) -> None:
        """Pad 4 then crop 224 reaches all 81 offsets and keeps the range."""
        labels = make_labels()
        rows = torch.arange(224).view(224, 1).float()
        cols = torch.arange(224).view(1, 224).float()
        code = (rows * 224 + cols) / (224 * 224)
        sample = ImageSample(code.unsqueeze(0), labels[0])
        policy = AugmentationPolicy(horizontal_flip_probability=0.0, pad_pixels=4, crop_size=(224, 224))

        offsets = set()
        for seed in range(3000):
            out = augment(sample, policy, np.random.default_rng(seed))
            assert out.shape == (1, 224, 224)
            assert out.pixels.min() >= -1.0 and out.pixels.max() <= 1.0
            index = int(round(out.pixels[0, 8, 8].item() * 224 * 224))
            offsets.add((index // 224 - 8, index % 224 - 8))
            if len(offsets) == 81:
                break
        assert offsets == {(dy, dx) for dy in range(-4, 5) for dx in range(-4, 5)}

    def test_infeasible_crop(self, sample) -> None:
        policy = AugmentationPolicy(pad_pixels=0, crop_size=(40, 40))
        with pytest.raises(ConfigurationError):
            augment(sample, policy, np.random.default_rng(0))

    def test_policy_rejects_crop_beyond_padded_input(self) -> None:
        assert AugmentationPolicy(pad_pixels=2, crop_size=(228, 228)).crop_size == (228, 228)
        with pytest.raises(ValidationError):
            AugmentationPolicy(pad_pixels=2, crop_size=(229, 224))


class TestExpandDataset:
    """Merging real and synthetic pools."""

    def test_concatenates_and_resizes(self) -> None:
        labels = make_labels()
        real = LabeledDataset([ImageSample(torch.zeros(1, 16, 16), labels[0], origin="r")], labels)
        synthetic = LabeledDataset(
            [ImageSample(torch.ones(1, 16, 16), labels[1], SampleSource.SYNTHETIC, "g")],
            labels,
        )
        pool = expand_dataset(real, synthetic, target_shape=(3, 32, 32))
        assert len(pool) == 2
        assert pool.role == DatasetRole.TRAIN
        assert all(s.shape == (3, 32, 32) for s in pool)
        assert pool.counts() == {"COVID-19": 1, "NORMAL": 1, "VIRAL_PNEUMONIA": 0}

    def test_nothing_to_expand(self) -> None:
        with pytest.raises(ConfigurationError):
            expand_dataset(None, None)

    def test_tree_round_trip(self, tmp_path) -> None:
        """A written dataset tree ingests back to the same counts."""
        labels = make_labels()
        samples = [
            ImageSample(torch.full((1, 8, 8), 0.5), labels[i % 3], origin=f"x{i}.png")
            for i in range(7)
        ]
        written = write_dataset_tree(LabeledDataset(samples, labels), tmp_path / "tree")
        assert len(written) == 7
        back = ingest_directory(tmp_path / "tree", labels, (1, 8, 8))
        assert back.counts() == {"COVID-19": 3, "NORMAL": 2, "VIRAL_PNEUMONIA": 2}
