"""Run configuration: TOML file plus command-line overrides (flag > file > default)."""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbones import ConfigError
from .data.synth import SceneSpec
from .model import PRESETS, ModelConfig, preset
from .optim import TrainConfig

_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in ("name", "seed")]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]
_FREE_LENGTH = {"model.bu_widths", "model.td_widths"}


def _tomlable(v):
    if isinstance(v, tuple):
        return [_tomlable(x) for x in v]
    return v


def defaults(preset_name: str = "dpit-tiny") -> dict[str, Any]:
    """Flat ``section.key`` -> default value. Model defaults come from the chosen preset."""
    base = preset(preset_name)
    tc = TrainConfig()
    spec = SceneSpec()
    d: dict[str, Any] = {
        "seed": 0,
        "skeleton": "coco17",
        "data_dir": "data/synth",
        "out_dir": "runs/dpit",
        "model.preset": preset_name,
    }
    for k in _MODEL_KEYS:
        d[f"model.{k}"] = _tomlable(getattr(base, k))
    for k in _TRAIN_KEYS:
        v = getattr(tc, k)
        if k == "drop_epochs":
            v = "auto"  # proportional to epochs; 240 -> [190, 220]
        elif k == "max_steps":
            v = 0  # 0 = unlimited
        d[f"train.{k}"] = _tomlable(v)
    d["data.count"] = 32
    d["data.image_size"] = list(spec.image_hw)
    d["data.persons"] = list(spec.persons)
    d["data.scale"] = list(spec.scale)
    d["data.overlap_prob"] = spec.overlap_prob
    return d


def flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str) -> Any:
    """Interpret a flag value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _check_type(key: str, value, default):
    if key == "train.drop_epochs" and (value == "auto" or isinstance(value, list)):
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and (key in _FREE_LENGTH or len(value) == len(default))
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__} like {default!r}, got {value!r}")
    return value


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def model(self) -> ModelConfig:
        kw = {k: self.values[f"model.{k}"] for k in _MODEL_KEYS}
        return ModelConfig(name=self.values["model.preset"], seed=self.seed, **kw)

    def train(self) -> TrainConfig:
        kw = {k: self.values[f"train.{k}"] for k in _TRAIN_KEYS}
        if kw["drop_epochs"] == "auto":
            kw["drop_epochs"] = TrainConfig.scaled_drops(kw["epochs"])
        kw["max_steps"] = kw["max_steps"] or None
        try:
            return TrainConfig(seed=self.seed, **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def scene(self, seed: int | None = None) -> SceneSpec:
        v = self.values
        try:
            return SceneSpec(tuple(v["data.image_size"]), tuple(v["data.persons"]), tuple(v["data.scale"]),
                             float(v["data.overlap_prob"]), self.seed if seed is None else seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None


def resolve(file_values: dict[str, Any] | None = None, flag_values: dict[str, Any] | None = None) -> RunConfig:
    """Merge flat dicts with precedence flag > file > default; unknown keys are errors."""
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
    name = flag_values.get("model.preset", file_values.get("model.preset", "dpit-tiny"))
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = defaults(name)
    merged = copy.deepcopy(base)
    for src in (file_values, flag_values):
        for k, v in src.items():
            if k not in base:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _check_type(k, v, base[k])
    cfg = RunConfig(merged)
    cfg.model()  # validate geometry early
    cfg.train()
    cfg.scene()
    return cfg


def load_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return flatten(tomllib.loads(p.read_text()))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
