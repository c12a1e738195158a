"""Flat ``key=value`` config files."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable, Mapping, TypeVar

T = TypeVar("T")


class ConfigFileError(ValueError):
    pass


def parse_key_values(lines: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {n}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_key_values(path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text(encoding="utf-8").splitlines())


def _coerce(value: str, kind: Any) -> Any:
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if "bool" in kind:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"not a boolean: {value!r}")
    if kind.startswith("int"):
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return value


def coerce_dataclass(cls: type[T], values: Mapping[str, str], strict: bool = True) -> T:
    """Build ``cls`` from string values, converting by annotated field type."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if strict and unknown:
        raise ConfigFileError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        if key in known:
            try:
                kwargs[key] = _coerce(raw, known[key].type)
            except ValueError as exc:
                raise ConfigFileError(f"{key}: {exc}") from None
    return cls(**kwargs)


def dataclass_lines(obj) -> list[str]:
    return [f"{k}={v}" for k, v in dataclasses.asdict(obj).items()]
