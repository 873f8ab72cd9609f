"""Plain-text ``section.key = value`` configuration files."""

from __future__ import annotations

import ast
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _parse_value(text: str) -> Any:
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} has no section")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = _parse_value(value)
    return out


def load_config(path: str | Path) -> dict[str, dict[str, Any]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: dict[str, dict[str, Any]]) -> str:
    lines = []
    for section, values in cfg.items():
        for key, value in values.items():
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{section}.{key} = {value!r}" if isinstance(value, str) else f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"


def dump_config(cfg: dict[str, dict[str, Any]], path: str | Path) -> None:
    Path(path).write_text(format_config(cfg))
