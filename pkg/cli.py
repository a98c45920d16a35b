"""
CXR Augment command-line tool

Subcommands: prepare, train-gan, generate, train-clf, evaluate. Each takes
``--config <file.yaml>`` plus overrides. Exit codes: 0 success,
2 configuration error, 3 checkpoint/fingerprint error, 4 missing
prerequisite artifact, 1 anything else.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ValidationError

from config import PipelineSettings, load_config
from cxr_augment import __version__
from cxr_augment.config import PipelineConfig
from cxr_augment.exceptions import (
    CheckpointError,
    ConfigurationError,
    CxrAugmentError,
    MissingArtifactError,
    PretrainedWeightsError,
    SelectionError,
)
from cxr_augment.models.classifier import BackboneId
from cxr_augment.pipeline import (
    cmd_evaluate,
    cmd_generate,
    cmd_prepare,
    cmd_train_clf,
    cmd_train_gan,
)

logger = logging.getLogger("cxr-cli")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_MISSING = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxr-augment",
        description="WGAN-GP augmentation and frozen-backbone classification for chest radiographs",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Overrides CXR_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Available commands")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, type=Path, help="Pipeline config (YAML)")
        sub.add_argument("--seed", type=int, default=None, help="Overrides every seed, including per-class and per-backbone blocks")
        return sub

    prepare_p = add("prepare", "Ingest and normalize the real corpus")
    prepare_p.add_argument("--jobs", type=int, default=1, help="Decode threads")

    gan_p = add("train-gan", "Train one WGAN-GP per class")
    gan_p.add_argument("--class", dest="class_name", default=None, help="Train only this class")
    gan_p.add_argument("--epochs", type=int, default=None)
    gan_p.add_argument("--max-steps", type=int, default=None, help="Stop after this many generator updates")
    gan_p.add_argument("--snapshot-every", type=int, default=None)
    gan_p.add_argument("--checkpoint-every", type=int, default=None)
    gan_p.add_argument("--resume", type=Path, default=None, help="Checkpoint to continue from")
    gan_p.add_argument("--parallel", action="store_true", help="Train classes as parallel jobs")

    gen_p = add("generate", "Generate and select synthetic images")
    gen_p.add_argument("--class", dest="class_name", default=None)
    gen_p.add_argument("--n", type=int, default=None, help="Images per class")

    clf_p = add("train-clf", "Train a frozen-backbone classifier")
    clf_p.add_argument("--backbone", required=True, help="vgg16, resnet50, googlenet or mnasnet")
    clf_p.add_argument("--epochs", type=int, default=None)

    eval_p = add("evaluate", "Evaluate a trained classifier")
    eval_p.add_argument("--backbone", required=True)
    eval_p.add_argument("--weights", choices=["final", "best"], default="final")
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys set by command-line flags."""
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        for key in ("gan.seed", "classifier.seed", "split.seed", "generation_seed"):
            overrides[key] = args.seed
    if args.command == "train-gan":
        overrides.update(
            {
                "gan.epochs": args.epochs,
                "gan.max_steps": args.max_steps,
                "gan.snapshot_every": args.snapshot_every,
                "gan.checkpoint_every": args.checkpoint_every,
            }
        )
    elif args.command == "train-clf":
        overrides["classifier.epochs"] = args.epochs
    return overrides


def parse_backbone(value: str) -> BackboneId:
    try:
        return BackboneId.parse(value)
    except ValueError as e:
        raise ConfigurationError(str(e), {"backbone": value}) from e


def _flag_values(args: argparse.Namespace, *names: str) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _revalidate(block: BaseModel, updates: Dict[str, Any], where: str) -> BaseModel:
    try:
        return type(block).model_validate({**block.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {where}: {e}", {"overrides": updates}) from e


def apply_run_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Carry ``--seed`` and the run-length flags into per-class and per-backbone blocks.

    ``config_overrides`` only reaches the top-level ``gan`` and ``classifier``
    blocks; entries of ``gan_overrides`` and ``classifier_overrides`` replace
    those blocks wholesale and get the same flags here.
    """
    gan_updates = _flag_values(args, "seed")
    clf_updates = dict(gan_updates)
    if args.command == "train-gan":
        gan_updates.update(
            _flag_values(args, "epochs", "max_steps", "snapshot_every", "checkpoint_every")
        )
    elif args.command == "train-clf":
        clf_updates.update(_flag_values(args, "epochs"))

    update: Dict[str, Any] = {}
    if gan_updates and cfg.gan_overrides:
        update["gan_overrides"] = {
            name: _revalidate(block, gan_updates, f"gan_overrides.{name}")
            for name, block in cfg.gan_overrides.items()
        }
    if clf_updates and cfg.classifier_overrides:
        update["classifier_overrides"] = {
            backbone: _revalidate(block, clf_updates, f"classifier_overrides.{backbone.value}")
            for backbone, block in cfg.classifier_overrides.items()
        }
    return cfg.model_copy(update=update) if update else cfg


def run(args: argparse.Namespace, settings: PipelineSettings) -> Any:
    backbone = parse_backbone(args.backbone) if hasattr(args, "backbone") else None
    cfg = apply_run_overrides(load_config(args.config, config_overrides(args), settings), args)

    if args.command == "prepare":
        return cmd_prepare(cfg, n_jobs=args.jobs)
    if args.command == "train-gan":
        return cmd_train_gan(cfg, args.class_name, args.resume, args.parallel)
    if args.command == "generate":
        return cmd_generate(cfg, args.class_name, args.n)
    if args.command == "train-clf":
        return cmd_train_clf(cfg, backbone, settings.device, settings.cache_dir)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, backbone, args.weights, settings.device)
    raise ConfigurationError(f"Unknown command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = PipelineSettings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    try:
        result = run(args, settings)
    except (ConfigurationError, SelectionError) as e:
        logger.error("Configuration error: %s", e.message)
        return EXIT_CONFIG
    except OSError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except CheckpointError as e:
        logger.error("Checkpoint error: %s", e.message)
        return EXIT_CHECKPOINT
    except (MissingArtifactError, PretrainedWeightsError) as e:
        logger.error("Missing artifact: %s", e.message)
        return EXIT_MISSING
    except CxrAugmentError as e:
        logger.error("%s failed: %s", args.command, e.message)
        return EXIT_UNEXPECTED

    logger.info("%s finished: %s", args.command, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
