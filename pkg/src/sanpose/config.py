"""Flat key-value run configs: YAML file, ``key=value`` overrides, resolved echo."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .errors import ConfigError


def read_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    return data


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            out[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value in {item!r}: {exc}") from exc
    return out


def build(cls, *layers: Mapping[str, Any]):
    """Instantiate dataclass ``cls`` from successive override layers; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values: dict[str, Any] = {}
    for layer in layers:
        for key, val in (layer or {}).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}; "
                                  f"known: {', '.join(sorted(fields))}")
            values[key] = val
    for key, val in list(values.items()):
        default = fields[key].default
        if isinstance(default, tuple) and isinstance(val, list):
            values[key] = tuple(val)
        elif isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{key} expects true/false, got {val!r}")
        elif isinstance(default, float) and not isinstance(val, bool) and isinstance(val, (int, str)):
            # YAML 1.1 reads "1e-3" (no decimal point) as a string
            try:
                values[key] = float(val)
            except ValueError:
                raise ConfigError(f"{key} expects a number, got {val!r}") from None
        elif isinstance(default, int) and not isinstance(default, bool) and not (
                isinstance(val, int) and not isinstance(val, bool)):
            raise ConfigError(f"{key} expects an integer, got {val!r}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def write_echo(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(obj), sort_keys=True))
    return path
