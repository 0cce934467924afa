"""Plain-text run configuration: `key = value` lines, `#` comment lines.

Unknown keys are rejected with the offending line number, and every value is
validated before any work starts.  Missing keys fall back to the defaults
below (the large-model geometry for the model, the standard recipe for
training).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {
    "stages": int,
    "hidden": int,
    "bottleneck": int,
    "stacks": int,
    "blocks": int,
    "kernel": int,
    "fft_size": int,
    "hop": int,
    "seed": int,
}
_TRAIN_KEYS = {
    "lr": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "batch": int,
    "epochs": int,
    "train_seed": int,
    "clip_norm": float,
}
_PATH_KEYS = ("train_manifest", "checkpoint")

_MODEL_DEFAULTS = dict(
    stages=5, hidden=256, bottleneck=128, stacks=3, blocks=8,
    kernel=3, fft_size=512, hop=256, seed=0,
)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    train_manifest: str | None
    checkpoint: str | None


def parse_config_file(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _MODEL_KEYS and key not in _TRAIN_KEYS and key not in _PATH_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            if not value:
                raise ConfigError(f"{path}:{lineno}: empty value for {key!r}")
            raw[key] = value

    def typed(key, caster, default):
        if key not in raw:
            return default
        try:
            return caster(raw[key])
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {raw[key]!r}") from exc

    model_kwargs = {
        name: typed(key, int, _MODEL_DEFAULTS[key])
        for key, name in (
            ("stages", "stages"), ("hidden", "hidden"), ("bottleneck", "bottleneck"),
            ("stacks", "stacks"), ("blocks", "blocks_per_stack"), ("kernel", "kernel"),
            ("fft_size", "fft_size"), ("hop", "hop"), ("seed", "seed"),
        )
    }
    train_defaults = TrainConfig()
    train_kwargs = dict(
        lr=typed("lr", float, train_defaults.lr),
        beta1=typed("beta1", float, train_defaults.beta1),
        beta2=typed("beta2", float, train_defaults.beta2),
        eps=typed("adam_eps", float, train_defaults.eps),
        batch=typed("batch", int, train_defaults.batch),
        epochs=typed("epochs", int, train_defaults.epochs),
        seed=typed("train_seed", int, train_defaults.seed),
        clip_norm=typed("clip_norm", float, None),
    )
    try:
        model_cfg = ModelConfig(**model_kwargs)
        train_cfg = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(
        model_cfg, train_cfg, raw.get("train_manifest"), raw.get("checkpoint")
    )


def default_run_config() -> RunConfig:
    return RunConfig(
        ModelConfig(
            stages=_MODEL_DEFAULTS["stages"],
            hidden=_MODEL_DEFAULTS["hidden"],
            bottleneck=_MODEL_DEFAULTS["bottleneck"],
            stacks=_MODEL_DEFAULTS["stacks"],
            blocks_per_stack=_MODEL_DEFAULTS["blocks"],
        ),
        TrainConfig(),
        None,
        None,
    )
