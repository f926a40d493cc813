"""TOML configuration files for training runs and scenarios.

Every key has a default, so an empty file is a valid config.
"""
from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ppo import NoiseConfig, TrainConfig


class ConfigError(ValueError):
    pass


def read_toml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_toml(data: dict[str, Any]) -> str:
    return tomli_w.dumps(_plain(data))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def _fill(cls, data: dict[str, Any], where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return data


def train_config_from_dict(data: dict[str, Any]) -> TrainConfig:
    body = dict(data.get("train", data))
    noise = body.pop("noise", {})
    _fill(TrainConfig, body, "train")
    _fill(NoiseConfig, noise, "train.noise")
    try:
        cfg = TrainConfig(**body, noise=NoiseConfig(**noise))
        if "hidden" in body:
            cfg.hidden = tuple(int(h) for h in body["hidden"])
        for name in ("episode_len", "batch_size", "epochs_per_batch", "minibatch_size", "total_steps", "seed"):
            value = getattr(cfg, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"train.{name} must be an integer, got {value!r}")
        return cfg.validate()
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_train_config(path: str | Path) -> TrainConfig:
    return train_config_from_dict(read_toml(path))


def train_config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    return {"train": cfg.to_dict()}
