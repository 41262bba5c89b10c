"""Tiny `key: value` text format used for configs and phantom specs."""

from __future__ import annotations

from .errors import ConfigError


def read_kv_file(path) -> dict[str, str]:
    """Parse `key: value` lines; '#' starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key: value', got {raw.strip()!r}")
            key, value = line.split(":", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def parse_floats(value: str, count: int, key: str) -> tuple[float, ...]:
    tokens = value.split()
    if len(tokens) != count:
        raise ConfigError(f"{key!r} needs {count} numbers, got {len(tokens)}")
    try:
        return tuple(float(t) for t in tokens)
    except ValueError as exc:
        raise ConfigError(f"bad number in {key!r}: {exc}") from exc


def parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key!r} must be a boolean, got {value!r}")
