"""
Keep requirements.txt in sync with the third-party imports of src/, tests/ and scripts/.

    python scripts/check_imports.py            # report missing and unused requirements
    python scripts/check_imports.py --write    # append missing packages to requirements.txt
    python scripts/check_imports.py --install  # also pip-install anything not installed

Exit status is 1 when an imported package is not listed in requirements.txt.
"""

from __future__ import annotations

import argparse
import ast
import importlib.metadata
import re
import subprocess
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

ROOT_DIR = Path(__file__).resolve().parent.parent
REQUIREMENTS_PATH = ROOT_DIR / "requirements.txt"
SCANNED_DIRS = ("src", "tests", "scripts")

# import name -> distribution name, where they differ
PACKAGE_MAP = {
    "dotenv": "python-dotenv",
    "sklearn": "scikit-learn",
    "pytest_asyncio": "pytest-asyncio",
}

# listed for tooling rather than imported
IMPLICIT_REQUIREMENTS = {"pytest-asyncio"}


def _iter_py_files(root: Path = ROOT_DIR) -> Iterable[Path]:
    for name in SCANNED_DIRS:
        base = root / name
        if base.is_dir():
            yield from sorted(p for p in base.rglob("*.py") if "__pycache__" not in p.parts)


def _stdlib_names() -> Set[str]:
    names = set(sys.builtin_module_names)
    names.update(getattr(sys, "stdlib_module_names", set()))
    return names


def imports_in_source(source: str) -> Set[str]:
    """Top-level module names imported by absolute imports in `source`."""
    modules: Set[str] = set()
    try:
        tree = ast.parse(source)
    except SyntaxError:
        return modules
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                modules.add(alias.name.split(".")[0])
        elif isinstance(node, ast.ImportFrom) and not node.level and node.module:
            modules.add(node.module.split(".")[0])
    return modules


def third_party(modules: Iterable[str], root: Path = ROOT_DIR) -> Set[str]:
    stdlib = _stdlib_names()
    found: Set[str] = set()
    for mod in modules:
        if mod in stdlib or mod in {"src", "scripts", "tests", "conftest"}:
            continue
        if any((root / base / mod).exists() or (root / base / f"{mod}.py").exists() for base in SCANNED_DIRS):
            continue
        found.add(mod)
    return found


def to_packages(modules: Iterable[str], dist_map: Optional[Dict[str, List[str]]] = None) -> Set[str]:
    if dist_map is None:
        dist_map = importlib.metadata.packages_distributions()
    packages: Set[str] = set()
    for mod in modules:
        if mod in PACKAGE_MAP:
            packages.add(PACKAGE_MAP[mod])
        elif dist_map.get(mod):
            packages.add(dist_map[mod][0])
        else:
            packages.add(mod)
    return packages


def parse_requirements(lines: Sequence[str]) -> Tuple[List[str], Set[str]]:
    entries: List[str] = []
    names: Set[str] = set()
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        entries.append(line)
        name = re.split(r"[<>=!~\[;]", line, maxsplit=1)[0].strip()
        if name:
            names.add(name.lower())
    return entries, names


def requirement_drift(imported: Set[str], listed: Set[str]) -> Tuple[Set[str], Set[str]]:
    """(imported but not listed, listed but never imported)."""
    imported = {p.lower() for p in imported}
    missing = imported - listed
    unused = listed - imported - {p.lower() for p in IMPLICIT_REQUIREMENTS}
    return missing, unused


def _installed(package: str) -> bool:
    try:
        importlib.metadata.version(package)
        return True
    except importlib.metadata.PackageNotFoundError:
        return False


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--write", action="store_true", help="append missing packages to requirements.txt")
    parser.add_argument("--install", action="store_true", help="pip-install requirements that are not installed")
    args = parser.parse_args(argv)

    modules: Set[str] = set()
    for path in _iter_py_files():
        modules |= imports_in_source(path.read_text(encoding="utf-8"))
    packages = to_packages(third_party(modules))
    print(f"Found {len(packages)} third-party packages: {sorted(packages)}")

    lines = REQUIREMENTS_PATH.read_text(encoding="utf-8").splitlines() if REQUIREMENTS_PATH.exists() else []
    entries, names = parse_requirements(lines)
    missing, unused = requirement_drift(packages, names)
    for pkg in sorted(unused):
        print(f"⚠ {pkg} is listed but never imported")
    if missing:
        print(f"⚠ not in requirements.txt: {sorted(missing)}")
        if args.write:
            REQUIREMENTS_PATH.write_text("\n".join(entries + sorted(missing)) + "\n", encoding="utf-8")
            print("✓ requirements.txt updated")
    else:
        print("✓ requirements.txt covers every import")

    if args.install:
        for pkg in sorted(names | missing):
            if not _installed(pkg):
                subprocess.run([sys.executable, "-m", "pip", "install", pkg], check=False)
    return 1 if missing and not args.write else 0


if __name__ == "__main__":
    raise SystemExit(main())
