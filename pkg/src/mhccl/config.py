"""Flat ``dotted.key=value`` configuration files mapped onto nested frozen dataclasses."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Iterable, Optional


class ConfigError(ValueError):
    pass


def _is_dc(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _fields(cls):
    hints = typing.get_type_hints(cls)
    return [(f.name, hints[f.name]) for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")]


def to_kv(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for name, tp in _fields(type(obj)):
        val = getattr(obj, name)
        key = prefix + name
        if _is_dc(tp):
            out.update(to_kv(val, key + "."))
        elif isinstance(val, bool):
            out[key] = "true" if val else "false"
        elif isinstance(val, tuple):
            out[key] = ",".join(str(v) for v in val)
        else:
            out[key] = str(val)
    return out


def _coerce(key: str, raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if tp is tuple or origin is tuple:
            args = typing.get_args(tp)
            inner = args[0] if args else int
            return tuple(inner(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_kv(cls, kv: dict[str, str], prefix: str = ""):
    """Build ``cls`` from dotted keys; unknown keys and invalid values raise ``ConfigError``."""
    known = set(to_kv(cls(), prefix)) if not prefix else None
    if known is not None:
        for key in kv:
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration key")
    kwargs = {}
    for name, tp in _fields(cls):
        key = prefix + name
        if _is_dc(tp):
            kwargs[name] = from_kv(tp, kv, key + ".")
        elif key in kv:
            kwargs[name] = _coerce(key, kv[key], tp)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        head = msg.split(":", 1)[0].split()[0] if msg.strip() else ""
        names = [n for n, _ in _fields(cls)]
        field = head if head in names else next((n for n in names if n in msg), None)
        where = prefix + field if field else prefix.rstrip(".") or cls.__name__
        if field and msg.startswith(field + ":"):
            msg = msg[len(field) + 1 :].strip()
        raise ConfigError(f"{where}: {msg}") from None


def read_kv_file(path) -> dict[str, str]:
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    return kv


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    kv = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        kv[key.strip()] = val.strip()
    return kv


def parse_config(cls, path: Optional[str] = None, overrides: Iterable[str] = ()):
    """Defaults, then file values, then command-line overrides."""
    kv = read_kv_file(path) if path else {}
    kv.update(parse_overrides(overrides))
    return from_kv(cls, kv)


def write_config(obj, path) -> None:
    kv = to_kv(obj)
    Path(path).write_text("".join(f"{k}={kv[k]}\n" for k in sorted(kv)))
