"""
Atomic JSON persistence for plans, reports, records and resolved configs.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Dict

FORMAT_VERSION = 1


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def _clean(value: Any) -> Any:
    # NaN is not valid JSON; encode it as null.
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        try:
            return _clean(value.item())
        except (ValueError, TypeError):
            return str(value)
    return value


def dumps(document: Dict[str, Any]) -> str:
    return json.dumps(_clean(document), indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_document(document: Dict[str, Any], path: Path) -> Path:
    """
    Persist a document atomically, stamping the format version.
    """
    path = Path(path)
    _ensure_parent(path)
    payload = dict(document)
    payload.setdefault("format_version", FORMAT_VERSION)
    temp = path.with_suffix(path.suffix + ".tmp")
    temp.write_text(dumps(payload), encoding="utf-8")
    temp.replace(path)
    return path


def load_document(path: Path) -> Dict[str, Any]:
    """
    Load a JSON document; raises FileNotFoundError / json.JSONDecodeError as-is.
    """
    with Path(path).open("r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    data.setdefault("format_version", FORMAT_VERSION)
    return data


def nan_or(value: Any) -> float:
    """Inverse of the NaN -> null encoding."""
    return float("nan") if value is None else float(value)
