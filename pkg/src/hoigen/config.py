"""Run configuration: one nested dataclass tree with defaults for every field.

Files may be JSON or YAML. Unknown keys are rejected. Environment variables of the form
``HOIGEN_SECTION__FIELD=value`` override file values (value parsed as JSON, else kept as a string).
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import DiffusionConfig
from .errors import ConfigError, InvalidConfig
from .jointvae import JointVAEConfig
from .manivae import LossWeights, ManiVAEConfig
from .ssm import SSMConfig

ENV_PREFIX = "HOIGEN_"


@dataclass
class PathsConfig:
    dataset: str = "runs/dataset.bin"
    joint_ckpt: str = "runs/jointvae.ckpt"
    mani_ckpt: str = "runs/manivae.ckpt"
    diffusion_ckpt: str = "runs/diffusion.ckpt"
    log_dir: str = "runs/logs"


@dataclass
class DataConfig:
    families: list = field(default_factory=lambda: ["bi-art"])
    count: int = 4
    frames: int = 32
    object_points: int = 256


@dataclass
class TrainConfig:
    vae_steps: int = 2000
    vae_lr: float = 1e-3
    vae_batch: int = 256  # frames per ManiVAE step; sequences per JointVAE step
    diffusion_steps: int = 500
    diffusion_lr: float = 5e-4
    diffusion_batch: int = 8
    grad_clip: float = 1.0
    log_every: int = 1
    std_floor: float = 0.05


@dataclass
class SampleConfig:
    frames: int = 150
    hand_type: str = "bimanual"
    instruction: str = "open and close the box with both hands"
    object_seed: int = 0  # default object when no --object file is given; independent of the sampling seed


@dataclass
class MetricsConfig:
    voxel_size: float = 0.004
    hand_radius: float = 0.008
    dt: float = 1.0 / 30.0


@dataclass
class AblateConfig:
    backbones: list = field(default_factory=lambda: ["gru", "tconv", "attention", "ssm"])
    vae_steps: int = 300
    diffusion_steps: int = 100
    sample_steps: int = 100  # diffusion chain length used during the ablation
    conditions: int = 2
    samples_per_condition: int = 2
    frames: int = 32
    scaling_lengths: list = field(default_factory=lambda: [256, 512, 1024, 2048])


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    jointvae: JointVAEConfig = field(default_factory=JointVAEConfig)
    manivae: ManiVAEConfig = field(default_factory=ManiVAEConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mask_eps: float = 0.0
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, path)
        else:
            kwargs[name] = _coerce(tp, value, path)
    try:
        return cls(**kwargs)
    except InvalidConfig as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(tp, value, path):
    base = typing.get_origin(tp) or tp
    if base is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if base is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if base is bool and isinstance(value, bool):
        return value
    if base is str and isinstance(value, str):
        return value
    if base is list and isinstance(value, list):
        return list(value)
    raise ConfigError(f"{path}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults, then the file, then ``HOIGEN_*`` env vars, then explicit overrides."""
    data = to_dict(RunConfig())
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        try:
            loaded = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
            _check_keys(RunConfig, loaded, "")
            data = _merge(data, loaded)
    env = env_overrides(environ)
    _check_keys(RunConfig, env, "")
    data = _merge(data, env)
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data)


def _check_keys(cls, data: dict, where: str) -> None:
    """Reject unknown keys before merging so typos are not masked by defaults."""
    hints = typing.get_type_hints(cls)
    for k, v in data.items():
        if k not in hints:
            raise ConfigError(f"unknown config key: {where + '.' if where else ''}{k}")
        if dataclasses.is_dataclass(hints[k]) and isinstance(v, dict):
            _check_keys(hints[k], v, f"{where}.{k}" if where else k)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True))


__all__ = ["RunConfig", "PathsConfig", "DataConfig", "TrainConfig", "SampleConfig", "MetricsConfig",
           "AblateConfig", "SSMConfig", "load_config", "from_dict", "to_dict", "save_config", "env_overrides"]
