"""Run configuration: a flat JSON object with dotted keys.

Example:
    {"model.d": 48, "mix.scope": "enc_dec", "mix.domains": 2,
     "train.max_steps": 2000, "data.train": "data/train.tsv"}

Unknown keys and ill-typed values raise ConfigError naming the key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .mixing import ConfigError
from .model import MixConfig, ModelConfig
from .training import TrainConfig


@dataclass
class DataPaths:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    vocab: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataPaths = field(default_factory=DataPaths)
    out_dir: str = "runs/default"
    precision: str = "f32"

    def validate(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        self.mix.validate()
        self.train.validate()
        # vocab_size is filled from data at command start; validate the rest
        if self.model.vocab_size:
            self.model.validate()

    def require_paths(self, *names: str):
        for name in names:
            value = getattr(self.data, name)
            if not value:
                raise ConfigError(f"config key 'data.{name}' is required for this command")
            if not Path(value).exists():
                raise ConfigError(f"data.{name}: path does not exist: {value}")


_SECTION_FIELDS = {
    "model": {f.name: f.type for f in fields(ModelConfig)},
    "mix": {f.name: f.type for f in fields(MixConfig)},
    "train": {f.name: f.type for f in fields(TrainConfig)},
    "data": {f.name: f.type for f in fields(DataPaths)},
}
# "mix.loss_reduction" reads better than the internal field name
_ALIASES = {"mix.loss_reduction": ("mix", "mix_loss_reduction")}


def apply_key(cfg: RunConfig, key: str, value):
    if key in _ALIASES:
        section, attr = _ALIASES[key]
    elif key == "out.dir":
        cfg.out_dir = str(value)
        return
    elif key == "precision":
        cfg.precision = str(value)
        return
    elif "." in key:
        section, attr = key.split(".", 1)
    else:
        raise ConfigError(f"unknown config key {key!r}")
    if section not in _SECTION_FIELDS or attr not in _SECTION_FIELDS[section]:
        raise ConfigError(f"unknown config key {key!r}")
    target = getattr(cfg, section)
    current = getattr(target, attr)
    try:
        if isinstance(current, bool) or _SECTION_FIELDS[section][attr] == "bool":
            if not isinstance(value, bool):
                raise ValueError("expected true/false")
            coerced = value
        elif isinstance(current, int) and not isinstance(current, bool):
            coerced = int(value)
        elif isinstance(current, float):
            coerced = float(value)
        else:
            coerced = value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: bad value {value!r} ({exc})") from exc
    setattr(target, attr, coerced)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object of dotted keys")
    cfg = RunConfig()
    for key, value in raw.items():
        apply_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        apply_key(cfg, key, value)
    cfg.validate()
    return cfg
