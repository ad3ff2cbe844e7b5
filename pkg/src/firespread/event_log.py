"""
JSON-lines event log for runs, folds and commands.
"""

from __future__ import annotations

import json
import traceback
import warnings
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from src.config import settings

_STATE: Dict[str, Any] = {"path": settings.event_log, "quiet": settings.quiet}
_EVENTS: List[Dict[str, Any]] = []
_MAX_IN_MEMORY = 10_000


def configure(path: Optional[Path] = None, quiet: Optional[bool] = None) -> None:
    """
    Point the log at a file (None keeps events in memory only). Also used as
    the worker initializer, so spawned processes append to the same file.
    """
    _STATE["path"] = Path(path) if path else None
    if quiet is not None:
        _STATE["quiet"] = quiet


def current() -> Tuple[Optional[Path], bool]:
    """(path, quiet) as configured in this process."""
    return _STATE["path"], bool(_STATE["quiet"])


def _jsonable(value: Any) -> Any:
    try:
        json.dumps(value)
        return value
    except TypeError:
        return str(value)


def log_event(event_type: str, data: Dict[str, Any]) -> Dict[str, Any]:
    entry = {"type": event_type, "data": {k: _jsonable(v) for k, v in data.items()}}
    _EVENTS.append(entry)
    if len(_EVENTS) > _MAX_IN_MEMORY:
        del _EVENTS[: len(_EVENTS) - _MAX_IN_MEMORY]
    path = _STATE["path"]
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        except OSError:
            pass
    return entry


def log_error(exception: BaseException, **context: Any) -> Dict[str, Any]:
    tb = "".join(traceback.format_exception(type(exception), exception, exception.__traceback__))
    return log_event("error", {"error": type(exception).__name__, "traceback": tb, **context})


def warn(message: str, **context: Any) -> None:
    """Emit a RuntimeWarning and record it."""
    warnings.warn(message, RuntimeWarning, stacklevel=3)
    log_event("warning", {"message": message, **context})


def echo(message: str, *, ok: bool = True) -> None:
    """Console progress line, silenced by quiet mode."""
    if _STATE["quiet"]:
        return
    print(f"{'✓' if ok else '⚠'} {message}")


def audit_log_lookup(limit: Optional[int] = 50, *, since_last_command: bool = False) -> List[Dict[str, Any]]:
    """
    Return the last `limit` events (all of them for None), from the log file if
    one is configured. `since_last_command` drops everything up to the last
    command_finished record, leaving the events of the command in progress.
    """
    path = _STATE["path"]
    if path is None or not path.exists():
        events = list(_EVENTS)
    else:
        events = []
        for line in path.read_text(encoding="utf-8").splitlines():
            try:
                events.append(json.loads(line))
            except Exception:
                continue
    if since_last_command:
        finished = [i for i, e in enumerate(events) if e.get("type") == "command_finished"]
        if finished:
            events = events[finished[-1] + 1 :]
    return events if limit is None else events[-limit:]


def clear() -> None:
    _EVENTS.clear()
