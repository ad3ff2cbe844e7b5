"""
Centralized Settings
====================
Single source of truth for environment-driven defaults.

Usage:
    from src.config import settings

    device = settings.device
    seed = settings.seed

Values come from the process environment (and a `.env` file if present).
Experiment definitions themselves live in JSON documents, not here.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

__all__ = ["Settings", "settings", "load_settings"]


@dataclass
class Settings:
    """Process-wide defaults for firespread runs."""
    device: str = "cpu"
    seed: int = 0
    parallel: int = 1
    quiet: bool = False
    event_log: Optional[Path] = None
    data_dir: Path = Path("data")
    extra: Dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        """Get a setting by key, falling back to `extra`."""
        return getattr(self, key, self.extra.get(key, default))


def _safe_int(value: Optional[str], default: int = 0) -> int:
    """Safely convert string to int, returning default if conversion fails."""
    try:
        if not value or any(char.isalpha() for char in value.replace("_", "")):
            return default
        return int(value)
    except (ValueError, TypeError):
        return default


def _safe_float(value: Optional[str], default: float = 0.0) -> float:
    try:
        return float(value) if value else default
    except (ValueError, TypeError):
        return default


def _flag(value: Optional[str], default: bool = False) -> bool:
    if value is None or value == "":
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


def load_settings() -> Settings:
    """Build settings from FIRESPREAD_* environment variables."""
    event_log = os.getenv("FIRESPREAD_EVENT_LOG", "")
    return Settings(
        device=os.getenv("FIRESPREAD_DEVICE", "cpu") or "cpu",
        seed=_safe_int(os.getenv("FIRESPREAD_SEED", "0"), 0),
        parallel=max(1, _safe_int(os.getenv("FIRESPREAD_PARALLEL", "1"), 1)),
        quiet=_flag(os.getenv("FIRESPREAD_QUIET"), False),
        event_log=Path(event_log) if event_log else None,
        data_dir=Path(os.getenv("FIRESPREAD_DATA_DIR", "data") or "data"),
        extra={
            "eval_batch_size": _safe_int(os.getenv("FIRESPREAD_EVAL_BATCH_SIZE", "32"), 32),
            "diff_tolerance": _safe_float(os.getenv("FIRESPREAD_DIFF_TOLERANCE", "1e-5"), 1e-5),
        },
    )


# Global singleton instance
settings = load_settings()
