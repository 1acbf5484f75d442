"""Run configuration: presets, YAML loading and strict key validation.

Precedence, lowest to highest: preset < config file < command-line flags.
The seed may additionally be overridden by the ``FRAMERS_SEED`` environment
variable, which sits between the config file and the ``--seed`` flag.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .framemae import PretrainHyperparams
from .patchcube import ModelConfig
from .selector import SelectorHyperparams

SEED_ENV = "FRAMERS_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str | None = None  # dataset directory; planted clips are generated when unset
    stride: int = 2
    pretrain_clips: int = 8
    label_clips: int = 500
    eval_clips: int = 50
    pretrain_seed: int = 0
    label_seed: int = 1
    eval_seed: int = 2


@dataclass
class SelectorSection:
    proj_dim: int = 384
    blocks: int = 3
    hidden: int = 512
    dropout: float = 0.1
    k: int = 2
    train: SelectorHyperparams = field(default_factory=SelectorHyperparams)
    ablation: list = field(default_factory=lambda: [[3, 0.1], [3, 0.0], [4, 0.0]])


@dataclass
class CodecSection:
    k: int = 2
    policies: list = field(default_factory=lambda: ["uniform", "random", "oracle", "learned"])
    random_seed: int = 0


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    out_dir: str = "runs/toy"
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: PretrainHyperparams = field(default_factory=PretrainHyperparams)
    selector: SelectorSection = field(default_factory=SelectorSection)
    codec: CodecSection = field(default_factory=CodecSection)

    def to_dict(self) -> dict:
        return asdict(self)


TOY_MODEL = dict(
    height=64,
    width=64,
    spatial_patch=8,
    embed_dim=96,
    encoder_depth=4,
    encoder_heads=4,
    decoder_dim=48,
    decoder_depth=2,
    decoder_heads=4,
)

PRESETS: dict[str, dict] = {
    "paper": {"out_dir": "runs/paper", "model": {}, "train": {"batch_size": 8}},
    "toy": {
        "out_dir": "runs/toy",
        "model": TOY_MODEL,
        "train": {"steps": 1200, "batch_size": 8, "lr": 2e-3, "min_lr_ratio": 0.3, "log_every": 100},
        "selector": {"train": {"epochs": 60, "lr": 1e-3, "batch_size": 32}},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _build(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key {(path + '.' if path else '') + unknown[0]}")
    kwargs: dict[str, Any] = {}
    for name, value in values.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def resolve(preset: str = "toy", file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Expand a preset, then apply config-file values and flag overrides."""
    file_values = dict(file_values or {})
    preset = file_values.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    values = _merge({"preset": preset, **PRESETS[preset]}, file_values)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    values = _merge(values, {k: v for k, v in (overrides or {}).items() if v is not None})
    return _build(RunConfig, values, "")


def load(path=None, preset: str = "toy", overrides: dict | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        file_values = yaml.safe_load(p.read_text()) or {}
    return resolve(preset, file_values, overrides)


def dump(cfg: RunConfig, path) -> None:
    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj

    Path(path).write_text(yaml.safe_dump(plain(cfg.to_dict()), sort_keys=True))
