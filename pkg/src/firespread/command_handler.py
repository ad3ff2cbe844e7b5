"""
Command registry and dispatch for the command-line entry point.

Handlers register under a name with a function that adds their arguments
to an argparse sub-parser. Dispatch maps failures to exit codes:

    0  success
    1  validation failure (bad document, bad protocol, unknown channel, missing path)
    2  runtime failure, or a run that finished with partial outputs
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from typing import Callable, Dict, Optional

from pydantic import ValidationError

from . import event_log
from .errors import VALIDATION_ERRORS

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

Handler = Callable[[argparse.Namespace], int]
Configure = Callable[[argparse.ArgumentParser], None]


@dataclass
class Command:
    name: str
    handler: Handler
    configure: Configure
    help: str = ""


COMMANDS: Dict[str, Command] = {}


def register_commands(commands: Dict[str, Command]) -> None:
    """Register handlers into the in-memory registry."""
    COMMANDS.update({k.lower(): v for k, v in commands.items()})


def command(name: str, configure: Configure, help: str = "") -> Callable[[Handler], Handler]:
    """Decorator form of register_commands."""

    def _wrap(handler: Handler) -> Handler:
        register_commands({name: Command(name, handler, configure, help)})
        return handler

    return _wrap


def add_subparsers(parser: argparse.ArgumentParser, parents=()) -> None:
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, cmd in sorted(COMMANDS.items()):
        child = sub.add_parser(name, help=cmd.help, parents=list(parents))
        cmd.configure(child)


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        location = ".".join(str(p) for p in err.get("loc", ())) or "<document>"
        parts.append(f"{location}: {err.get('msg', 'invalid')}")
    return "; ".join(parts)


def dispatch(args: argparse.Namespace) -> int:
    """Run the selected command and translate its outcome into an exit code."""
    name = (getattr(args, "command", None) or "").lower()
    cmd: Optional[Command] = COMMANDS.get(name)
    if cmd is None:
        event_log.echo(f"unknown command {name!r}", ok=False)
        return EXIT_VALIDATION
    try:
        code = cmd.handler(args)
    except ValidationError as exc:
        message = _format_validation(exc)
        event_log.log_event("command_finished", {"command": name, "exit_code": EXIT_VALIDATION, "error": message})
        event_log.echo(f"{name}: invalid document: {message}", ok=False)
        return EXIT_VALIDATION
    except (*VALIDATION_ERRORS, FileNotFoundError) as exc:
        event_log.log_event("command_finished", {"command": name, "exit_code": EXIT_VALIDATION, "error": str(exc)})
        event_log.echo(f"{name}: {exc}", ok=False)
        return EXIT_VALIDATION
    except Exception as exc:
        event_log.log_error(exc, command=name)
        event_log.log_event("command_finished", {"command": name, "exit_code": EXIT_RUNTIME, "error": str(exc)})
        event_log.echo(f"{name} failed: {type(exc).__name__}: {exc}", ok=False)
        return EXIT_RUNTIME
    event_log.log_event("command_finished", {"command": name, "exit_code": code})
    return code
