"""
Tests for config loading, the pipeline subcommands and the command-line tool.
"""

import json
import logging
from pathlib import Path

import pandas as pd

try:
    import pytest
except ImportError:
    pass

from cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_MISSING,
    EXIT_OK,
    apply_run_overrides,
    build_parser,
    config_overrides,
    main,
)
from config import PipelineSettings, load_config
from cxr_augment.artifacts import load_manifest
from cxr_augment.config import EvaluationSource, TrainSource
from cxr_augment.exceptions import ConfigurationError
from cxr_augment.models.classifier import BackboneId
from cxr_augment.models.labels import DEFAULT_CLASS_NAMES
from cxr_augment.pipeline import OutputLayout, evaluation_set
from tests.config import load_test_config, write_config
from tests.conftest import write_corpus

logger = logging.getLogger("cxr-tests")

REAL_COUNTS = {name: 6 for name in DEFAULT_CLASS_NAMES}
TEST_COUNTS = {"COVID-19": 3, "NORMAL": 3, "VIRAL_PNEUMONIA": 0}


def run_cli(config_path: Path, command: str, *args: str) -> int:
    return main([command, "--config", str(config_path), *args])


class TestLoadConfig:
    """YAML loading, overrides and validation."""

    def test_toy_config(self, make_corpus, tmp_path) -> None:
        real = make_corpus()
        cfg = load_test_config(write_config(tmp_path, real, tmp_path / "out"))
        assert cfg.gan.image_size == 16
        assert cfg.gan.generator.z_dim == 8
        assert cfg.class_names == list(DEFAULT_CLASS_NAMES)
        assert cfg.train_source == TrainSource.SYNTHETIC
        assert cfg.test_source == EvaluationSource.REAL

    def test_relative_paths_resolve_against_file(self, make_corpus, tmp_path) -> None:
        make_corpus()
        path = write_config(tmp_path, Path("real"), Path("out"))
        cfg = load_test_config(path)
        assert cfg.real_root == tmp_path.resolve() / "real"
        assert cfg.output_root == tmp_path.resolve() / "out"

    def test_dotted_overrides(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        cfg = load_test_config(path, {"gan.seed": 42, "classifier.epochs": None})
        assert cfg.gan.seed == 42
        assert cfg.classifier.epochs == 1

    def test_environment_output_root(self, make_corpus, tmp_path, monkeypatch) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        monkeypatch.setenv("CXR_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
        cfg = load_config(path, settings=PipelineSettings())
        assert cfg.output_root == tmp_path / "elsewhere"
        assert load_test_config(path).output_root == tmp_path.resolve() / "out"

    def test_unknown_key(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out", gan={"learning_rate": 0.1})
        with pytest.raises(ConfigurationError) as exc_info:
            load_test_config(path)
        assert "learning_rate" in exc_info.value.message

    def test_missing_class_directory(self, make_corpus, tmp_path) -> None:
        """The error names the missing directory."""
        real = make_corpus(counts={"COVID-19": 2, "NORMAL": 2})
        with pytest.raises(ConfigurationError) as exc_info:
            load_test_config(write_config(tmp_path, real, tmp_path / "out"))
        assert "VIRAL_PNEUMONIA" in exc_info.value.message

    def test_unreadable_file(self, tmp_path) -> None:
        with pytest.raises(ConfigurationError):
            load_test_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path) -> None:
        path = tmp_path / "broken.yaml"
        path.write_text("gan: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_test_config(path)

    def test_unknown_class_in_counts(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out", generation_counts={"TB": 3})
        with pytest.raises(ConfigurationError):
            load_test_config(path)

    def test_unreachable_generator_size(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out", gan={"generator": {"out_size": 100}})
        with pytest.raises(ConfigurationError) as exc_info:
            load_test_config(path)
        assert "100" in exc_info.value.message

    def test_real_test_source_needs_test_root(self, make_corpus, tmp_path) -> None:
        real = make_corpus()
        path = write_config(tmp_path, real, tmp_path / "out", with_test_root=False)
        with pytest.raises(ConfigurationError) as exc_info:
            load_test_config(path)
        assert "test_root" in exc_info.value.message
        cfg = load_test_config(path, {"test_source": "SYNTHETIC"})
        assert cfg.test_root is None

    def test_crop_larger_than_padded_input(self, make_corpus, tmp_path) -> None:
        """A 224 input padded by 4 on each side allows crops up to 232."""
        real = make_corpus()
        fits = write_config(
            tmp_path / "fits", real, tmp_path / "out", classifier={"augmentation": {"pad_pixels": 4, "crop_size": [232, 232]}}
        )
        assert load_test_config(fits).classifier.augmentation.crop_size == (232, 232)
        too_big = write_config(
            tmp_path / "big", real, tmp_path / "out", classifier={"augmentation": {"pad_pixels": 4, "crop_size": [233, 224]}}
        )
        with pytest.raises(ConfigurationError):
            load_test_config(too_big)

    def test_conflicting_noise_length(self, make_corpus, tmp_path) -> None:
        """An explicit generator z_dim must agree with the run z_dim."""
        real = make_corpus()
        clash = write_config(tmp_path / "clash", real, tmp_path / "out", gan={"generator": {"z_dim": 32}})
        with pytest.raises(ConfigurationError) as exc_info:
            load_test_config(clash)
        assert "z_dim" in exc_info.value.message
        agree = write_config(tmp_path / "agree", real, tmp_path / "out", gan={"generator": {"z_dim": 8}})
        assert load_test_config(agree).gan.generator.z_dim == 8

    def test_conflicting_critic_size(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out", gan={"critic": {"in_size": 32}})
        with pytest.raises(ConfigurationError):
            load_test_config(path)


class TestRunOverrides:
    """Command-line flags reach per-class and per-backbone blocks."""

    @pytest.fixture
    def config_path(self, make_corpus, tmp_path) -> Path:
        return write_config(
            tmp_path,
            make_corpus(),
            tmp_path / "out",
            gan_overrides={"NORMAL": {"epochs": 7, "seed": 1, "z_dim": 8}},
            classifier_overrides={"RESNET50": {"backbone": "RESNET50", "epochs": 9, "seed": 1}},
        )

    def _load(self, config_path: Path, *argv: str):
        args = build_parser().parse_args(list(argv[:1]) + ["--config", str(config_path)] + list(argv[1:]))
        return apply_run_overrides(load_test_config(config_path, config_overrides(args)), args)

    def test_seed_reaches_override_blocks(self, config_path) -> None:
        cfg = self._load(config_path, "generate", "--seed", "42")
        assert cfg.gan.seed == 42
        assert cfg.gan_for("NORMAL").seed == 42
        assert cfg.gan_for("COVID-19").seed == 42
        assert cfg.classifier_for(BackboneId.RESNET50).seed == 42
        assert cfg.classifier_for(BackboneId.VGG16).seed == 42
        assert cfg.split.seed == cfg.generation_seed == 42

    def test_gan_flags_reach_class_blocks(self, config_path) -> None:
        cfg = self._load(config_path, "train-gan", "--epochs", "2", "--max-steps", "5")
        normal = cfg.gan_for("NORMAL")
        assert (normal.epochs, normal.max_steps) == (2, 5)
        assert normal.seed == 1
        assert cfg.classifier_for(BackboneId.RESNET50).epochs == 9

    def test_classifier_epochs_reach_backbone_blocks(self, config_path) -> None:
        cfg = self._load(config_path, "train-clf", "--backbone", "mnasnet", "--epochs", "3")
        assert cfg.classifier_for(BackboneId.RESNET50).epochs == 3
        assert cfg.classifier_for(BackboneId.MNASNET).epochs == 3
        assert cfg.gan_for("NORMAL").epochs == 7

    def test_without_flags_blocks_unchanged(self, config_path) -> None:
        cfg = self._load(config_path, "prepare")
        assert cfg.gan_for("NORMAL").seed == 1
        assert cfg.classifier_for(BackboneId.RESNET50).epochs == 9

    def test_invalid_flag_value(self, config_path) -> None:
        with pytest.raises(ConfigurationError):
            self._load(config_path, "train-gan", "--epochs", "0")


@pytest.mark.usefixtures("no_env_output_root")
class TestExitCodes:
    """Error-to-exit-code mapping of the command-line tool."""

    def test_missing_class_directory(self, make_corpus, tmp_path) -> None:
        real = make_corpus(counts={"COVID-19": 2, "NORMAL": 2})
        assert run_cli(write_config(tmp_path, real, tmp_path / "out"), "prepare") == EXIT_CONFIG
        assert not (tmp_path / "out" / "prepared").exists()

    def test_invalid_generator_size_writes_nothing(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out", gan={"generator": {"out_size": 100}})
        assert run_cli(path, "prepare") == EXIT_CONFIG
        assert not (tmp_path / "out").exists()

    def test_unknown_backbone(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        assert run_cli(path, "train-clf", "--backbone", "alexnet") == EXIT_CONFIG

    def test_generate_before_training(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        assert run_cli(path, "generate") == EXIT_MISSING

    def test_train_gan_before_prepare(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        assert run_cli(path, "train-gan") == EXIT_MISSING

    def test_evaluate_without_model(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out", test_root=str(make_corpus("test")))
        assert run_cli(path, "evaluate", "--backbone", "mnasnet") == EXIT_MISSING

    def test_resume_needs_class(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        assert run_cli(path, "train-gan", "--resume", str(tmp_path / "x.pt")) == EXIT_CONFIG

    def test_resume_fingerprint_mismatch(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        assert run_cli(path, "prepare") == EXIT_OK
        assert run_cli(path, "train-gan", "--class", "NORMAL", "--epochs", "1") == EXIT_OK
        latest = tmp_path / "out" / "gan" / "NORMAL" / "checkpoints" / "latest.pt"
        assert latest.is_file()
        code = run_cli(path, "train-gan", "--class", "NORMAL", "--resume", str(latest), "--seed", "9")
        assert code == EXIT_CHECKPOINT

    def test_resume_continues(self, make_corpus, tmp_path) -> None:
        path = write_config(tmp_path, make_corpus(), tmp_path / "out")
        assert run_cli(path, "prepare") == EXIT_OK
        assert run_cli(path, "train-gan", "--class", "COVID-19", "--epochs", "1") == EXIT_OK
        latest = tmp_path / "out" / "gan" / "COVID-19" / "checkpoints" / "latest.pt"
        code = run_cli(path, "train-gan", "--class", "COVID-19", "--resume", str(latest), "--epochs", "2")
        assert code == EXIT_OK
        losses = pd.read_csv(tmp_path / "out" / "gan" / "COVID-19" / "losses.csv")
        # 6 images in batches of 4: one full batch and one of 2 per epoch
        assert len(losses) == 4


@pytest.mark.usefixtures("no_env_output_root")
class TestStages:
    """Artifacts of each subcommand on a toy corpus."""

    @pytest.fixture(scope="class")
    def run(self, tmp_path_factory):
        """prepare, train-gan, generate and train-clf once for the whole class."""
        base = tmp_path_factory.mktemp("stages")
        real = write_corpus(base / "real", REAL_COUNTS)
        test = write_corpus(base / "test", TEST_COUNTS, seed=1)
        path = write_config(base, real, base / "out", test_root=test)
        with pytest.MonkeyPatch.context() as patch:
            patch.delenv("CXR_OUTPUT_ROOT", raising=False)
            codes = {
                "prepare": run_cli(path, "prepare"),
                "train-gan": run_cli(path, "train-gan", "--epochs", "2", "--snapshot-every", "1"),
                "generate": run_cli(path, "generate", "--n", "10"),
                "train-clf": run_cli(path, "train-clf", "--backbone", "mnasnet"),
            }
        return path, OutputLayout(base / "out"), codes

    def test_exit_codes(self, run) -> None:
        _, _, codes = run
        assert codes == {"prepare": 0, "train-gan": 0, "generate": 0, "train-clf": 0}

    def test_prepared_tree(self, run) -> None:
        _, layout, _ = run
        counts = pd.read_csv(layout.prepared / "counts.csv")
        assert counts["class"].tolist() == [*DEFAULT_CLASS_NAMES, "Total"]
        assert counts["train"].tolist() == [6, 6, 6, 18]
        assert counts["test"].tolist() == [3, 3, 0, 6]
        assert len(list((layout.prepared_train / "NORMAL").glob("*.png"))) == 6
        assert (layout.prepared / "class_distribution.png").is_file()

    def test_snapshot_grids(self, run) -> None:
        """Two epochs with snapshots every epoch give two grids per class."""
        _, layout, _ = run
        for name in DEFAULT_CLASS_NAMES:
            grids = sorted(p.name for p in (layout.gan(name) / "snapshots").glob("*.png"))
            assert grids == ["epoch_1.png", "epoch_2.png"]
            assert (layout.gan(name) / "losses.csv").is_file()
            assert (layout.gan(name) / "checkpoints" / "latest.pt").is_file()

    def test_synthetic_counts(self, run) -> None:
        _, layout, _ = run
        for name in DEFAULT_CLASS_NAMES:
            assert len(list((layout.synthetic / name).glob("*.png"))) == 10

    def test_model_artifacts(self, run) -> None:
        _, layout, _ = run
        out = layout.model(BackboneId.MNASNET)
        for name in ("model.pt", "learning_curve.csv", "summary.json", "summary.txt", "split.json", "loss.png", "accuracy.png"):
            assert (out / name).is_file(), name
        split = json.loads((out / "split.json").read_text(encoding="utf-8"))
        assert set(split["train_origins"]).isdisjoint(split["validation_origins"])
        assert len(split["validation_origins"]) == 6
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["trainable_parameters"] == 3_843

    def test_manifest(self, run) -> None:
        _, layout, _ = run
        manifest = load_manifest(layout.root)
        assert manifest is not None
        assert "prepared/counts.csv" in manifest.artifacts
        assert "models/mnasnet/model.pt" in manifest.artifacts

    def test_evaluate_with_absent_class(self, run) -> None:
        """A test set without one class still evaluates, with two ROC curves."""
        path, layout, _ = run
        assert run_cli(path, "evaluate", "--backbone", "mnasnet") == EXIT_OK
        out = layout.eval / "mnasnet"
        assert sorted(p.name for p in out.glob("roc_*.csv")) == ["roc_COVID-19.csv", "roc_NORMAL.csv"]
        metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
        assert sum(map(sum, metrics["confusion_matrix"])) == 6
        assert (out / "report.txt").is_file()
        summary = pd.read_csv(layout.eval / "summary.csv")
        assert summary["backbone"].tolist() == ["MNASNET"]
        assert 0.0 <= summary["testing_accuracy"].iloc[0] <= 100.0

    def test_generate_zero(self, run) -> None:
        path, layout, _ = run
        assert run_cli(path, "generate", "--class", "NORMAL", "--n", "0") == EXIT_OK
        assert list((layout.synthetic / "NORMAL").iterdir()) == []
        assert run_cli(path, "generate", "--class", "NORMAL", "--n", "10") == EXIT_OK

    def test_synthetic_evaluation_set(self, run) -> None:
        path, _, _ = run
        cfg = load_test_config(path, {"test_source": "SYNTHETIC", "test_synthetic_count": 4})
        dataset = evaluation_set(cfg)
        assert dataset.counts() == {name: 4 for name in DEFAULT_CLASS_NAMES}
        assert evaluation_set(cfg)[0] == dataset[0]


@pytest.mark.slow
@pytest.mark.usefixtures("no_env_output_root")
class TestEndToEnd:
    """Full command chain run twice with identical seeds."""

    @staticmethod
    def _chain(base: Path, real: Path, test: Path) -> Path:
        path = write_config(base, real, base / "out", test_root=test)
        steps = [
            ("prepare",),
            ("train-gan", "--epochs", "2"),
            ("generate", "--n", "50"),
            ("train-clf", "--backbone", "mnasnet", "--epochs", "2"),
            ("evaluate", "--backbone", "mnasnet"),
        ]
        for command, *args in steps:
            assert run_cli(path, command, *args, "--seed", "7") == EXIT_OK, command
        return base / "out"

    def test_metrics_byte_identical(self, tmp_path) -> None:
        real = write_corpus(tmp_path / "real", REAL_COUNTS)
        test = write_corpus(tmp_path / "test", {name: 3 for name in DEFAULT_CLASS_NAMES}, seed=1)
        first = self._chain(tmp_path / "a", real, test)
        second = self._chain(tmp_path / "b", real, test)

        relative = Path("eval") / "mnasnet" / "metrics.json"
        assert (first / relative).read_bytes() == (second / relative).read_bytes()
        for name in DEFAULT_CLASS_NAMES:
            a = sorted((first / "synthetic" / name).glob("*.png"))
            b = sorted((second / "synthetic" / name).glob("*.png"))
            assert len(a) == 50
            assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
