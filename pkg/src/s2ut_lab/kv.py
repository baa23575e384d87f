"""Flat key-value config files: one `key = value` per line, # comments.

Dataclass round-trip with typed coercion; CLI flag overrides win over file
values. Tuples serialize as comma-separated entries.
"""

from __future__ import annotations

import dataclasses
import typing


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv(path, obj) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            fh.write(f"{f.name} = {value}\n")


def coerce(type_hint, raw: str):
    origin = typing.get_origin(type_hint)
    if type_hint is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if type_hint is int:
        return int(raw)
    if type_hint is float:
        return float(raw)
    if type_hint is str:
        return raw
    if origin is tuple:
        args = typing.get_type_hints is None or typing.get_args(type_hint)
        elem = args[0] if args else int
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(coerce(elem, s.strip()) for s in items)
    raise ValueError(f"unsupported config field type {type_hint}")


def dataclass_from_kv(cls, values: dict[str, str], overrides: dict | None = None):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[key] = coerce(hints[key], raw)
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                kwargs[key] = value
    return cls(**kwargs)
