"""Base model class for all record types."""

import json
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Type, TypeVar, get_type_hints

import numpy as np

T = TypeVar("T", bound="BaseModel")


def _plain(value: Any) -> Any:
    """Convert a value into a JSON-compatible structure."""
    if isinstance(value, BaseModel):
        return value.to_dict()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


class BaseModel:
    """Base model class for all records with dict and JSON conversion."""

    def __init__(self, **data: Any) -> None:
        for key, value in data.items():
            setattr(self, key, value)

    @classmethod
    def from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
        """Create a model instance from a dictionary."""
        return cls(**{k: v for k, v in data.items() if k in get_type_hints(cls)})

    @classmethod
    def list_from_dicts(cls: Type[T], items: List[Dict[str, Any]]) -> List[T]:
        """Create a list of model instances from a list of dictionaries."""
        return [cls.from_dict(item) for item in items]

    def to_dict(self) -> Dict[str, Any]:
        """Convert model to a dictionary."""
        return {
            key: _plain(value)
            for key, value in self.__dict__.items()
            if not key.startswith("_")
        }

    def to_json(self, indent: int = 2) -> str:
        """Serialize model to a JSON document with sorted keys."""
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, type(self)):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        fields = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items())
        return f"{type(self).__name__}({fields})"
