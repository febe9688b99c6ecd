"""Flat ``key = value`` configuration files.

Grammar, one entry per line::

    # comment
    key = value
    key = [item, item, ...]

Keys are words that may contain dots (``plane.top``). Values are numbers,
``true``/``false``, bare words, or a bracketed comma-separated list of those.
Text after ``#`` is ignored. Duplicate keys are an error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Tuple

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _scalar(text: str, line: int):
    text = text.strip()
    if not text:
        raise ConfigError("empty value", line)
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str, line: int = 0):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError("unterminated list", line)
        inner = text[1:-1].strip()
        return [] if not inner else [_scalar(p, line) for p in inner.split(",")]
    return _scalar(text, line)


@dataclass
class Config:
    values: Dict[str, Any]
    lines: Dict[str, int]

    def __contains__(self, key):
        return key in self.values

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"missing required key '{key}'")
        return self.values[key]

    def line(self, key):
        return self.lines.get(key)

    def prefixed(self, prefix: str) -> Iterable[Tuple[str, Any]]:
        for k, v in self.values.items():
            if k.startswith(prefix + "."):
                yield k, v


def parse_config(text: str) -> Config:
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, val = (s.strip() for s in body.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"invalid key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key '{key}'", lineno)
        values[key] = parse_value(val, lineno)
        lines[key] = lineno
    return Config(values, lines)


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    return str(v)


def dump_config(values: Dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())
