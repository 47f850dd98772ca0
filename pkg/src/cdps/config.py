"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. A key may carry a
subcommand prefix (``invert.method = cdps``); prefixed keys for other
subcommands are skipped, everything else must be known to the schema.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    s = str(v).strip()
    return tuple(int(p) for p in s.split(",") if p.strip()) if s else ()


def _opt_float(v: str):
    s = str(v).strip().lower()
    return None if s in ("", "none") else float(s)


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "ints": _ints,
    "float?": _opt_float,
    "path": str,
    "path?": str,
}


@dataclass(frozen=True)
class Key:
    kind: str
    default: Any = None
    help: str = ""


def resolve(schema: dict, raw: dict, subcommand: str, known_subcommands) -> dict:
    """Typed values for ``subcommand``; raises :class:`ConfigError` on unknown keys or bad values."""
    values = {k: entry.default for k, entry in schema.items()}
    for key, text in raw.items():
        name = key
        if "." in key:
            prefix, rest = key.split(".", 1)
            if prefix in known_subcommands:
                if prefix != subcommand:
                    continue
                name = rest
        if name not in schema:
            raise ConfigError(f"unknown config key {key!r} for {subcommand}")
        entry = schema[name]
        try:
            values[name] = PARSERS[entry.kind](text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    for name, entry in schema.items():
        if entry.kind == "path" and values[name] in (None, ""):
            raise ConfigError(f"missing required path {name!r} for {subcommand}")
        if entry.kind.startswith("path") and values[name]:
            if not Path(values[name]).exists():
                raise ConfigError(f"{name}: file not found: {values[name]}")
    return values
