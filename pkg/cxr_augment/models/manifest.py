"""Run manifest model."""

from typing import Any, Dict, List

from cxr_augment.models.base import BaseModel


class RunManifest(BaseModel):
    """Provenance for a pipeline output tree.

    ``artifacts`` maps each produced path (relative to the output root) to
    the subcommand that last wrote it.
    """

    config_fingerprint: str
    seeds: Dict[str, int]
    tool_version: str
    created_at: str
    updated_at: str
    input_checksums: Dict[str, str]
    artifacts: Dict[str, str]

    def __init__(
        self,
        config_fingerprint: str,
        seeds: Dict[str, int],
        tool_version: str,
        created_at: str,
        updated_at: str,
        input_checksums: Dict[str, str] = None,
        artifacts: Dict[str, str] = None,
    ) -> None:
        super().__init__(
            config_fingerprint=config_fingerprint,
            seeds=dict(seeds),
            tool_version=tool_version,
            created_at=created_at,
            updated_at=updated_at,
            input_checksums=dict(input_checksums or {}),
            artifacts=dict(artifacts or {}),
        )

    def record(self, paths: List[str], command: str) -> None:
        for path in paths:
            self.artifacts[path] = command

    def comparable(self) -> Dict[str, Any]:
        """Manifest content without timestamps."""
        data = self.to_dict()
        data.pop("created_at")
        data.pop("updated_at")
        return data
