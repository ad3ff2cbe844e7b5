"""
Miscellaneous utility functions.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
from typing import Any, List, Optional

_DATE_PATTERN = re.compile(r"(\d{4}-\d{2}-\d{2})")


def parse_years(expr: str) -> List[int]:
    """
    Parse '2018,2019,2020' or '2016-2023' into an ordered list of years.
    """
    expr = expr.strip()
    range_match = re.fullmatch(r"(\d{4})\s*-\s*(\d{4})", expr)
    if range_match:
        start, end = int(range_match.group(1)), int(range_match.group(2))
        if end < start:
            raise ValueError("Invalid year range")
        return list(range(start, end + 1))
    parts = [p.strip() for p in expr.split(",") if p.strip()]
    if not parts or not all(re.fullmatch(r"\d{4}", p) for p in parts):
        raise ValueError("Invalid year list")
    return [int(p) for p in parts]


def date_from_name(name: str) -> Optional[dt.date]:
    """
    Extract the YYYY-MM-DD date a raster filename encodes; None if absent or invalid.
    """
    match = _DATE_PATTERN.search(name)
    if not match:
        return None
    try:
        return dt.date.fromisoformat(match.group(1))
    except ValueError:
        return None


def day_of_year(day: dt.date) -> int:
    """Day of year clipped to [1, 365]."""
    return min(day.timetuple().tm_yday, 365)


def derive_seed(*parts: Any) -> int:
    """
    Stable 32-bit seed from arbitrary parts (independent of PYTHONHASHSEED).
    """
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def config_hash(document: Any) -> str:
    payload = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
