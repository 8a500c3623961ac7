"""``key=value`` configuration text shared by the CLI and checkpoints.

Keys are the field names of :class:`~magn.model.ModelConfig` and
:class:`~magn.trainer.TrainConfig`; blank lines and ``#`` comments are
ignored.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

__all__ = ["parse_lines", "coerce", "build", "dump", "load_configs"]


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def coerce(default, text: str):
    if isinstance(default, bool):
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return type(default)(text)


def build(cls, values: dict):
    """Instantiate dataclass ``cls`` from string values, ignoring other keys."""
    kw = {}
    for f in fields(cls):
        if f.name in values:
            try:
                kw[f.name] = coerce(f.default, values[f.name])
            except ValueError as exc:
                raise ValueError(f"bad value for {f.name}: {exc}") from None
    return cls(**kw)


def dump(obj) -> list[str]:
    return [f"{f.name}={getattr(obj, f.name)}" for f in fields(obj)]


def load_configs(path):
    """Read a config file into ``(ModelConfig, TrainConfig)``; unknown keys are errors."""
    from .model import ModelConfig
    from .trainer import TrainConfig

    values = parse_lines(Path(path).read_text())
    known = {f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return build(ModelConfig, values), build(TrainConfig, values)
