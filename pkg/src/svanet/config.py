"""Flat ``dotted.key = value`` text for nested dataclass configs.

Values are JSON literals; bare words are read as strings. The canonical text
lists every field in declaration order, so it doubles as an audit echo.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from typing import Any

from .core import ConfigurationError


def _is_tuple_type(tp) -> bool:
    origin = typing.get_origin(tp)
    if origin is tuple:
        return True
    if origin is typing.Union or str(origin) == "types.UnionType":
        return any(_is_tuple_type(a) for a in typing.get_args(tp))
    return tp is tuple


def _field_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _encode(value) -> str:
    if isinstance(value, tuple):
        value = [list(v) if isinstance(v, tuple) else v for v in value]
    return json.dumps(value)


def _decode(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(value, tp):
    if value is None:
        return None
    if _is_tuple_type(tp) and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def flatten(cfg, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def to_text(cfg) -> str:
    return "".join(f"{k} = {_encode(v)}\n" for k, v in flatten(cfg).items())


def parse_text(text: str) -> dict[str, Any]:
    pairs: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = _decode(value)
    return pairs


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigurationError(f"override must look like key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), _decode(value)


def apply(cfg, pairs: dict[str, Any]):
    """A copy of ``cfg`` with dotted keys replaced; unknown keys raise."""
    known = flatten(cfg)
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return _rebuild(cfg, pairs, "")


def _rebuild(cfg, pairs, prefix):
    types = _field_types(type(cfg))
    changes = {}
    for f in dataclasses.fields(cfg):
        key = f"{prefix}{f.name}"
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            changes[f.name] = _rebuild(value, pairs, key + ".")
        elif key in pairs:
            changes[f.name] = _coerce(pairs[key], types[f.name])
    try:
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config under {prefix or 'root'}: {exc}") from exc


def from_text(cls_or_default, text: str):
    base = cls_or_default() if isinstance(cls_or_default, type) else cls_or_default
    return apply(base, parse_text(text))
