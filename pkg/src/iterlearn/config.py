"""Experiment configuration: JSON <-> nested dataclasses, with validation,
defaults and dotted-path overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .iterate import SPAWN_TARGETS, Schedule
from .metrics import ProbeConfig
from .training import TrainHyper
from .world import WorldSpec


@dataclass
class VisionConfig:
    hidden_dims: tuple = (64, 64)
    output_dim: int = 32


@dataclass
class LanguageConfig:
    hidden_dims: tuple = (64, 64)
    output_dim: int = 32
    embed_dim: int = 32


@dataclass
class CodebookConfig:
    C: int = 128
    D: int = 32
    init_seed: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldSpec = field(default_factory=WorldSpec)
    vision: VisionConfig = field(default_factory=VisionConfig)
    language: LanguageConfig = field(default_factory=LanguageConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    schedule: Schedule = field(default_factory=Schedule)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    spawn: str = "language"
    out_dir: str = "runs/default"
    log_every: int = 50
    use_codebook: bool = True
    freeze_codebook_in_distill: bool = True
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        validate(self)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.spawn not in SPAWN_TARGETS:
        raise ConfigError(f"spawn must be one of {SPAWN_TARGETS}, got {cfg.spawn!r}")
    if cfg.log_every < 1:
        raise ConfigError(f"log_every must be >= 1, got {cfg.log_every}")
    D = cfg.codebook.D
    for side in ("vision", "language"):
        out = getattr(cfg, side).output_dim
        if cfg.use_codebook and out != D:
            raise ConfigError(f"{side}.output_dim={out} does not match codebook.D={D}")
    if cfg.codebook.C < 2:
        raise ConfigError(f"codebook.C must be >= 2, got {cfg.codebook.C}")
    if cfg.hyper.batch_size > cfg.world.num_meanings:
        raise ConfigError(f"hyper.batch_size={cfg.hyper.batch_size} exceeds the world's "
                          f"{cfg.world.num_meanings} meanings")
    if cfg.probe.steps < 0 or cfg.probe.log_every < 1:
        raise ConfigError("probe.steps >= 0 and probe.log_every >= 1 required")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            v = _build(t, v, f"{path}.{k}" if path else k)
        elif t is tuple and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def to_dict(cfg) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, tuple):
            return [conv(v) for v in x]
        return x
    return conv(cfg)


def parse_config(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from e
    for ov in overrides:
        apply_override(data, ov)
    return from_dict(data)


def apply_override(data: dict, spec: str) -> dict:
    """Apply ``dotted.key=value`` in place; the value is parsed as JSON when possible."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not key=value")
    key, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part} is not an object")
    node[parts[-1]] = value
    return data


def replace(cfg: ExperimentConfig, **dotted) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path fields replaced, e.g. ``replace(c, **{"schedule.K": 0})``."""
    data = to_dict(cfg)
    for k, v in dotted.items():
        node = data
        parts = k.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = v
    return from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    data = to_dict(cfg)
    data.pop("out_dir", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)
