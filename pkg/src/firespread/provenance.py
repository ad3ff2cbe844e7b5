"""
Provenance: installed package versions and the resolved-config record each
command writes next to its outputs.
"""

from __future__ import annotations

import importlib.metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from src import __version__

from . import config_store
from .models import CHECKPOINT_FORMAT_VERSION

TRACKED_PACKAGES = ("numpy", "scipy", "torch", "scikit-learn", "pandas", "rasterio", "pydantic", "python-dotenv")


def version_check(packages: Iterable[str] = TRACKED_PACKAGES) -> Dict[str, Optional[str]]:
    """
    Return installed versions for packages; None if missing.
    """
    versions: Dict[str, Optional[str]] = {}
    for pkg in packages:
        try:
            versions[pkg] = importlib.metadata.version(pkg)
        except importlib.metadata.PackageNotFoundError:
            versions[pkg] = None
    return versions


def format_versions() -> Dict[str, int]:
    return {"document": config_store.FORMAT_VERSION, "checkpoint": CHECKPOINT_FORMAT_VERSION}


def version_banner() -> str:
    formats = ", ".join(f"{k} format {v}" for k, v in format_versions().items())
    return f"firespread {__version__} ({formats})"


def resolved_config(command: str, arguments: Dict[str, Any], documents: Dict[str, Any]) -> Dict[str, Any]:
    """Everything needed to re-run a command: version, arguments, validated documents."""
    return {
        "tool": "firespread",
        "tool_version": __version__,
        "format_versions": format_versions(),
        "packages": version_check(),
        "command": command,
        "arguments": {k: str(v) if isinstance(v, Path) else v for k, v in sorted(arguments.items())},
        "documents": documents,
    }


def write_resolved_config(out_dir: Path, command: str, arguments: Dict[str, Any], documents: Dict[str, Any]) -> Path:
    return config_store.save_document(resolved_config(command, arguments, documents), Path(out_dir) / "resolved_config.json")
