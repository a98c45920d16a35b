"""Pytest configuration file for pipeline tests."""

import logging
import shutil
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pytest
from PIL import Image

from cxr_augment.models.labels import DEFAULT_CLASS_NAMES

# Configure logging
logger = logging.getLogger("cxr-tests")

# Mean 8-bit intensity per class: toy corpora are separable by brightness.
CLASS_INTENSITY = {"COVID-19": 40, "NORMAL": 150, "VIRAL_PNEUMONIA": 230}


def pytest_sessionstart(session):
    """Set up test environment before session starts."""
    # Create .env file from .env.example if it doesn't exist
    root_dir = Path(__file__).parent.parent
    env_file = root_dir / ".env"
    env_example = root_dir / ".env.example"

    if not env_file.exists() and env_example.exists():
        shutil.copy(env_example, env_file)
        logger.info("Created .env file from .env.example for testing")


def write_corpus(
    root: Path,
    counts: Dict[str, int],
    size: int = 16,
    seed: int = 0,
    mode: str = "L",
) -> Path:
    """Write ``<root>/<Class>/img_<i>.png`` images whose brightness encodes the class."""
    rng = np.random.default_rng(seed)
    for name, count in counts.items():
        directory = root / name
        directory.mkdir(parents=True, exist_ok=True)
        base = CLASS_INTENSITY.get(name, 128)
        for i in range(count):
            pixels = np.clip(base + rng.normal(0, 8, (size, size)), 0, 255).astype(np.uint8)
            image = Image.fromarray(pixels)
            if mode != "L":
                image = image.convert(mode)
            image.save(directory / f"img_{i:03d}.png")
    return root


@pytest.fixture
def make_corpus(tmp_path: Path):
    """Factory writing a toy class-per-directory corpus under tmp_path."""

    def factory(
        name: str = "real",
        counts: Optional[Dict[str, int]] = None,
        size: int = 16,
        seed: int = 0,
        mode: str = "L",
    ) -> Path:
        counts = counts if counts is not None else {c: 6 for c in DEFAULT_CLASS_NAMES}
        return write_corpus(tmp_path / name, counts, size, seed, mode)

    return factory


@pytest.fixture
def no_env_output_root(monkeypatch):
    """Keep a developer's CXR_OUTPUT_ROOT out of the tests."""
    monkeypatch.delenv("CXR_OUTPUT_ROOT", raising=False)
