"""Structured ``key = value`` configuration files.

Keys are dotted paths into :class:`PipelineConfig`, e.g.::

    # toy benchmark
    grid.nx = 32
    model.channels = 8
    train.lr = 0.003
    bench.run_seeds = 0, 1, 2, 3, 4
    train.variant = concat

``grid.*`` and ``depth_bins.*`` apply to both the scene generator and the
model so the two can never disagree.  Tuples are comma separated, booleans
accept true/false/1/0/yes/no, and ``none`` clears optional values.
"""
from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Tuple

from .geometry import BevGrid, DepthBins
from .model import ModelConfig
from .pipeline import BenchmarkConfig, DetectConfig
from .synth import SceneConfig, toy_grid
from .train import TrainConfig


class ConfigFileError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"config line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class PipelineConfig:
    grid: BevGrid = field(default_factory=toy_grid)
    depth_bins: DepthBins = field(default_factory=lambda: DepthBins(1.0, 25.6, 32))
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)

    def scene_config(self) -> SceneConfig:
        return replace(self.scene, grid=self.grid, depth_bins=self.depth_bins)

    def model_config(self) -> ModelConfig:
        return replace(self.model, grid=self.grid, depth_bins=self.depth_bins)


def _coerce(text: str, typ, line: int):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    raw = text.strip()
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _coerce(raw, inner[0], line)
    if origin in (tuple, Tuple):
        parts = [p for p in raw.split(",") if p.strip()]
        elem = args[0] if args else str
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, elem, line) for p in parts)
        if args and len(parts) != len(args):
            raise ConfigFileError(line, f"expected {len(args)} comma-separated values, got {len(parts)}")
        return tuple(_coerce(p, a, line) for p, a in zip(parts, args))
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError:
        raise ConfigFileError(line, f"cannot read {raw!r} as {typ.__name__}") from None
    raise ConfigFileError(line, f"unsupported field type {typ}")


def _set_path(obj, path, value_text: str, line: int):
    hints = typing.get_type_hints(type(obj))
    name = path[0]
    names = {f.name for f in fields(obj)}
    if name not in names:
        raise ConfigFileError(line, f"unknown key {name!r} (choices: {', '.join(sorted(names))})")
    current = getattr(obj, name)
    if len(path) == 1:
        if is_dataclass(current):
            raise ConfigFileError(line, f"{name!r} is a section, not a value")
        value = _coerce(value_text, hints[name], line)
    else:
        if not is_dataclass(current):
            raise ConfigFileError(line, f"{name!r} has no sub-keys")
        value = _set_path(current, path[1:], value_text, line)
    try:
        return replace(obj, **{name: value})
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(line, str(exc)) from None


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        if not sep:
            raise ConfigFileError(lineno, "expected 'key = value'")
        path = [p.strip() for p in key.strip().split(".")]
        if not all(path):
            raise ConfigFileError(lineno, f"malformed key {key.strip()!r}")
        cfg = _set_path(cfg, path, value, lineno)
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: PipelineConfig, pairs) -> PipelineConfig:
    """Apply ``key=value`` strings (e.g. from ``--set``)."""
    return parse_config("\n".join(pairs), cfg)


def _flatten(obj, prefix: str) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def format_config(cfg: PipelineConfig) -> str:
    """Every effective setting as ``key = value`` (readable back by :func:`parse_config`)."""
    lines = []
    for key, v in _flatten(cfg, "").items():
        if key.startswith(("scene.grid", "scene.depth_bins", "model.grid", "model.depth_bins")):
            continue
        if isinstance(v, tuple):
            text = ", ".join(str(x) for x in v)
        elif v is None:
            text = "none"
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
