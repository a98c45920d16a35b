"""Class label models."""

from typing import Any, Dict, List, Sequence

from cxr_augment.exceptions import ConfigurationError
from cxr_augment.models.base import BaseModel

DEFAULT_CLASS_NAMES = ("COVID-19", "NORMAL", "VIRAL_PNEUMONIA")


class ClassLabel(BaseModel):
    """A registered class: dense integer id plus directory/display name."""

    id: int
    name: str

    def __init__(self, id: int, name: str) -> None:
        super().__init__(id=id, name=name)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClassLabel":
        """Create a ClassLabel from a dictionary."""
        return cls(id=int(data["id"]), name=str(data["name"]))

    def __hash__(self) -> int:
        return hash((self.id, self.name))

    def __str__(self) -> str:
        return self.name


def make_labels(names: Sequence[str] = DEFAULT_CLASS_NAMES) -> List[ClassLabel]:
    """Build a dense label set 0..K-1 from class names.

    Raises:
        ConfigurationError: if the names are empty or not unique
    """
    if not names:
        raise ConfigurationError("Label set must contain at least one class")
    duplicates = sorted({n for n in names if list(names).count(n) > 1})
    if duplicates:
        raise ConfigurationError(
            f"Duplicate class names in label set: {', '.join(duplicates)}",
            {"duplicates": duplicates},
        )
    return [ClassLabel(id=i, name=name) for i, name in enumerate(names)]


def label_by_name(labels: Sequence[ClassLabel], name: str) -> ClassLabel:
    """Look up a label by name."""
    for label in labels:
        if label.name == name:
            return label
    raise ConfigurationError(
        f"Unknown class '{name}'; expected one of {[l.name for l in labels]}",
        {"class": name},
    )
