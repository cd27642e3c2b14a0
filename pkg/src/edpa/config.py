"""``key=value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, TypeVar

from edpa.errors import ConfigError

T = TypeVar("T")


def read_kv(path) -> dict[str, str]:
    """Parse UTF-8 ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(name: str, raw: str, default: Any):
    try:
        if isinstance(default, bool):
            if raw.lower() not in {"1", "0", "true", "false", "yes", "no"}:
                raise ValueError(raw)
            return raw.lower() in {"1", "true", "yes"}
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def build(cls: type[T], kv: dict[str, str], base: T | None = None, ignore_unknown: bool = False) -> T:
    """Instantiate dataclass ``cls`` from string values, starting from ``base`` or the defaults.

    Floats accept fractions such as ``2/255``.
    """
    start = base if base is not None else cls()
    flds = {f.name: f for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in kv.items():
        if key not in flds:
            if ignore_unknown:
                continue
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        updates[key] = _coerce(key, raw, getattr(start, key))
    return dataclasses.replace(start, **updates)


def load_config(cls: type[T], path=None, overrides: dict[str, str] | None = None, ignore_unknown: bool = True) -> T:
    kv = read_kv(path) if path else {}
    kv.update(overrides or {})
    return build(cls, kv, ignore_unknown=ignore_unknown)


def dump_kv(obj) -> str:
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(obj).items())
