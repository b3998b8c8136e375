"""Flat ``key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys are dotted (``ring.n_cells``). Values stay strings here; typed
conversion happens in the dataclasses that own the keys.
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_flat(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_flat(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_flat(text, str(path))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if hasattr(value, "value"):  # enums
        return str(value.value)
    return str(value)


def dump_flat(items: dict, header: str | None = None) -> str:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines += [f"{k} = {format_value(v)}" for k, v in items.items()]
    return "\n".join(lines) + "\n"


def to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(text: str, tp, key: str):
    import enum
    import typing

    origin = typing.get_origin(tp)
    try:
        if origin is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if text.strip().lower() in ("", "none"):
                return None
            return _convert(text, args[0], key)
        if origin in (tuple, list):
            (elem, *rest) = typing.get_args(tp) or (str,)
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_convert(p, elem, key) for p in parts)
        if tp is bool:
            return to_bool(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(text.strip())
        return text.strip()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc


def dataclass_from_flat(cls, items: dict[str, str], prefix: str = "", strict: bool = True):
    """Build dataclass ``cls`` from ``prefix.field`` keys, recursing into nested
    dataclass fields. Missing keys keep their defaults. With ``strict`` any key
    under ``prefix`` that matches no field is an error."""
    import dataclasses
    import typing

    hints = typing.get_type_hints(cls)
    kwargs = {}
    known = set()
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = dataclass_from_flat(tp, items, key + ".", strict=strict)
            known.update(k for k in items if k.startswith(key + "."))
        elif key in items:
            kwargs[f.name] = _convert(items[key], tp, key)
            known.add(key)
    if strict:
        unknown = [k for k in items if k.startswith(prefix) and k not in known]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def dataclass_to_flat(obj, prefix: str = "") -> dict:
    import dataclasses

    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(dataclass_to_flat(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out
