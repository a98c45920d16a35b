"""
CXR Augment Configuration

Environment settings for the command-line tool and the loader that turns a
YAML pipeline config into a validated ``PipelineConfig``.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import find_dotenv, load_dotenv
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from cxr_augment.config import PipelineConfig
from cxr_augment.exceptions import ConfigurationError

# Load environment variables from .env file
load_dotenv(find_dotenv(usecwd=True))

logger = logging.getLogger("cxr-config")

PATH_FIELDS = ("real_root", "test_root", "metadata_csv", "output_root")


class PipelineSettings(BaseSettings):
    """Process-level settings read from CXR_* environment variables."""

    output_root: Optional[Path] = Field(
        None, description="Overrides output_root of every pipeline config"
    )
    log_level: str = Field("INFO", description="Root log level")
    device: str = Field("cpu", description="Torch device for classifier training")
    cache_dir: Path = Field(
        Path.home() / ".cache" / "cxr_augment",
        description="Download cache for pretrained weights",
    )

    def model_post_init(self, __context) -> None:
        """Log configuration status after initialization."""
        logger.debug(
            "Settings: output_root=%s, log_level=%s, device=%s, cache_dir=%s",
            self.output_root or "Not set",
            self.log_level,
            self.device,
            self.cache_dir,
        )

    model_config = SettingsConfigDict(
        env_prefix="CXR_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    keys = dotted.split(".")
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def _resolve_paths(data: Dict[str, Any], base: Path) -> None:
    for name in PATH_FIELDS:
        value = data.get(name)
        if value is None:
            continue
        path = Path(value).expanduser()
        data[name] = path if path.is_absolute() else (base / path)


def validate_paths(cfg: PipelineConfig) -> None:
    """Check every input path before any artifact is written.

    Raises:
        ConfigurationError: naming the first missing directory or file
    """
    roots = [("real_root", cfg.real_root)]
    if cfg.test_root is not None:
        roots.append(("test_root", cfg.test_root))
    for field, root in roots:
        if not root.is_dir():
            raise ConfigurationError(f"{field} {root} is not a directory", {"path": str(root)})
        for name in cfg.class_names:
            if not (root / name).is_dir():
                raise ConfigurationError(
                    f"Missing class directory {root / name}", {"path": str(root / name)}
                )
    if cfg.metadata_csv is not None and not cfg.metadata_csv.is_file():
        raise ConfigurationError(
            f"Metadata CSV {cfg.metadata_csv} does not exist", {"path": str(cfg.metadata_csv)}
        )
    if cfg.output_root.exists() and not cfg.output_root.is_dir():
        raise ConfigurationError(
            f"output_root {cfg.output_root} is not a directory", {"path": str(cfg.output_root)}
        )


def load_config(
    path: Union[str, Path],
    overrides: Optional[Dict[str, Any]] = None,
    settings: Optional[PipelineSettings] = None,
    test_mode: bool = False,
) -> PipelineConfig:
    """
    Load, override and validate a pipeline config file.

    Relative paths in the file are resolved against the file's directory.
    The CXR_OUTPUT_ROOT environment variable replaces output_root.

    Args:
        path: YAML config file
        overrides: Dotted keys to replace after reading (e.g. ``{"gan.seed": 3}``)
        settings: Environment settings; read from the environment when None
        test_mode: If True, environment settings are ignored

    Raises:
        ConfigurationError: if the file is unreadable or any value is invalid
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}", {"path": str(path)}) from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid YAML in {path}: {e}", {"path": str(path)}) from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config {path} must be a mapping", {"path": str(path)})

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)

    if not test_mode:
        settings = settings or PipelineSettings()
        if settings.output_root is not None:
            data["output_root"] = settings.output_root

    _resolve_paths(data, path.parent.resolve())

    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as e:
        problems = [
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        ]
        raise ConfigurationError(
            f"Invalid config {path}: " + "; ".join(problems), {"errors": problems}
        ) from e

    validate_paths(cfg)
    return cfg
