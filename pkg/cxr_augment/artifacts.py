"""
On-disk artifacts: atomic writes, checksums, CSV/JSON emission and the run manifest.

Every file the pipeline produces goes through ``atomic_write`` (or one of
the helpers built on it) so a crash never leaves a half-written artifact.
"""

import hashlib
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import pandas as pd
import requests
import torch

from cxr_augment import __version__
from cxr_augment.exceptions import CheckpointError, PretrainedWeightsError
from cxr_augment.models.manifest import RunManifest

logger = logging.getLogger("cxr-artifacts")

PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"
DOWNLOAD_TIMEOUT = 60  # seconds
CHUNK_SIZE = 1 << 20


@contextmanager
def atomic_write(path: PathLike, mode: str = "wb") -> Iterator[Any]:
    """Open a temp file next to ``path`` and rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    encoding = None if "b" in mode else "utf-8"
    newline = None if "b" in mode else ""
    try:
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def save_torch(payload: Any, path: PathLike) -> Path:
    """``torch.save`` through an atomic rename."""
    with atomic_write(path, "wb") as handle:
        torch.save(payload, handle)
    return Path(path)


def load_torch(path: PathLike) -> Any:
    """Load a torch artifact written by ``save_torch``.

    Raises:
        CheckpointError: if the file is unreadable
    """
    try:
        return torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as e:
        raise CheckpointError(f"Cannot read {path}: {e}", {"path": str(path)}) from e


def write_text(text: str, path: PathLike) -> Path:
    with atomic_write(path, "w") as handle:
        handle.write(text if text.endswith("\n") else text + "\n")
    return Path(path)


def write_json(data: Any, path: PathLike) -> Path:
    """Write ``data`` as sorted, indented JSON; the bytes depend only on the content."""
    return write_text(json.dumps(data, indent=2, sort_keys=True), path)


def read_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def write_csv(
    rows: Sequence[Dict[str, Any]], path: PathLike, columns: Optional[List[str]] = None
) -> Path:
    """Write rows as a UTF-8 comma-separated file with a header row."""
    frame = pd.DataFrame(list(rows), columns=columns)
    with atomic_write(path, "w") as handle:
        frame.to_csv(handle, index=False, lineterminator="\n")
    return Path(path)


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, encoding="utf-8")


# Checksums


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_tree(root: PathLike) -> str:
    """Checksum of every file under ``root``, keyed by relative path."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(sha256_file(path).encode("ascii"))
    return digest.hexdigest()


# Run manifest


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_manifest(output_root: PathLike) -> Optional[RunManifest]:
    path = Path(output_root) / MANIFEST_NAME
    if not path.exists():
        return None
    data = read_json(path)
    return RunManifest(
        config_fingerprint=data["config_fingerprint"],
        seeds=data.get("seeds", {}),
        tool_version=data.get("tool_version", __version__),
        created_at=data["created_at"],
        updated_at=data["updated_at"],
        input_checksums=data.get("input_checksums", {}),
        artifacts=data.get("artifacts", {}),
    )


def update_manifest(
    output_root: PathLike,
    command: str,
    paths: Sequence[PathLike],
    config_fingerprint: str,
    seeds: Dict[str, int],
    input_checksums: Optional[Dict[str, str]] = None,
) -> RunManifest:
    """Record ``paths`` as produced by ``command`` and rewrite the manifest atomically.

    Paths are stored relative to ``output_root``. Entries whose file no
    longer exists are dropped so the manifest never lists a missing artifact.
    """
    output_root = Path(output_root)
    manifest = load_manifest(output_root)
    now = _now()
    if manifest is None:
        manifest = RunManifest(
            config_fingerprint=config_fingerprint,
            seeds=seeds,
            tool_version=__version__,
            created_at=now,
            updated_at=now,
        )
    manifest.config_fingerprint = config_fingerprint
    manifest.seeds.update(seeds)
    manifest.tool_version = __version__
    manifest.updated_at = now
    if input_checksums:
        manifest.input_checksums.update(input_checksums)

    relative = []
    for path in paths:
        path = Path(path)
        try:
            relative.append(path.resolve().relative_to(output_root.resolve()).as_posix())
        except ValueError:
            relative.append(str(path))
    manifest.record(relative, command)
    manifest.artifacts = {
        name: cmd
        for name, cmd in sorted(manifest.artifacts.items())
        if (output_root / name).exists()
    }
    write_json(manifest.to_dict(), output_root / MANIFEST_NAME)
    logger.debug("Manifest updated by %s with %d artifacts", command, len(relative))
    return manifest


# Pretrained weights


def fetch_pretrained(url: str, cache_dir: PathLike, timeout: int = DOWNLOAD_TIMEOUT) -> Path:
    """Download ``url`` into ``cache_dir`` unless already cached.

    The body is streamed to a temp file and renamed into place, so a failed
    download never leaves a partial file under the final name.

    Raises:
        PretrainedWeightsError: with reason ``download`` on any transfer failure
    """
    cache_dir = Path(cache_dir)
    target = cache_dir / url.rstrip("/").rsplit("/", 1)[-1]
    if target.exists():
        return target

    logger.info("Downloading pretrained weights from %s", url)
    try:
        with requests.get(url, stream=True, timeout=timeout) as response:
            response.raise_for_status()
            with atomic_write(target, "wb") as handle:
                for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                    if chunk:
                        handle.write(chunk)
    except requests.exceptions.HTTPError as e:
        status = e.response.status_code if e.response is not None else None
        raise PretrainedWeightsError(
            f"HTTP error {status} downloading {url}", "download", str(target)
        ) from e
    except requests.exceptions.RequestException as e:
        raise PretrainedWeightsError(
            f"Download of {url} failed: {e}", "download", str(target)
        ) from e
    return target


def verify_checksum(path: PathLike, expected: Optional[str]) -> Path:
    """Check that ``path`` exists and, when ``expected`` is given, hashes to it.

    Raises:
        PretrainedWeightsError: reason ``missing`` or ``checksum``
    """
    path = Path(path)
    if not path.is_file():
        raise PretrainedWeightsError(
            f"Pretrained weights file {path} does not exist", "missing", str(path)
        )
    if expected:
        found = sha256_file(path)
        if found.lower() != expected.lower():
            raise PretrainedWeightsError(
                f"Checksum mismatch for {path}: expected {expected[:12]}, found {found[:12]}",
                "checksum",
                str(path),
            )
    return path
