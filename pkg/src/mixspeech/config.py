"""Run configuration: nested dataclasses loaded from strict JSON (unknown keys are errors)."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    stage2_lr: float = 5e-4


@dataclass
class MixConfig:
    phi_init: float = 0.1
    alpha: float = 1.2
    k: float = 0.05
    n: int = 20
    phi_min: float = 0.1
    phi_max: float = 0.9
    phi_orientation: str = "audio"


@dataclass
class TrainConfig:
    corpus_dir: str = "corpus"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mix: MixConfig = field(default_factory=MixConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage1_steps: int = 4000
    stage1_warmup_fraction: float = 0.1
    stage2_steps: int = 2000
    batch_size: int = 16
    eval_every: int = 250
    seed: int = 0
    stage2_modality: str = "visual"

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")
        if not 0.0 <= self.stage1_warmup_fraction <= 1.0:
            raise ConfigError("stage1_warmup_fraction must lie in [0, 1]")
        if self.stage2_modality not in ("audio", "visual"):
            raise ConfigError(f"stage2_modality must be audio or visual, got {self.stage2_modality!r}")
        if self.mix.phi_orientation not in ("audio", "visual"):
            raise ConfigError(f"mix.phi_orientation must be audio or visual, got {self.mix.phi_orientation!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        elif hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        elif hint in (int, str) and type(value) is not hint:
            raise ConfigError(f"{path}: expected {hint.__name__}, got {value!r}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "")


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def dump_config(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
