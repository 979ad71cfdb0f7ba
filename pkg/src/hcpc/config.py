"""Run configuration: nested dataclasses, YAML files, dotted-key overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .datagen import DataConfig
from .frame_cpc import FrameCpcConfig
from .segmenter import SegmenterConfig
from .unit_cpc import UnitCpcConfig

ABLATIONS = ("none", "no_adjacent", "no_reg", "no_quant")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-4
    warmup_epochs: int = 2
    pretrain_epochs: int = 20
    joint_epochs: int = 30
    seed: int = 0
    w_L: float = 1.0
    w_H: float = 1.0
    w_Q: float = 1.0
    w_pi: float = 1.0
    w_reg: float = 1.0
    policy_lr_mult: float = 1.0
    grad_clip: float = 5.0
    dtype: str = "float32"
    log_every: int = 0  # steps between intra-epoch records; 0 = one record per epoch
    max_rollbacks: int = 20
    ablation: str = "none"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("train.lr must be > 0")
        if self.warmup_epochs < 0 or self.warmup_epochs > max(self.pretrain_epochs, 1):
            raise ValueError("train.warmup_epochs must be in [0, pretrain_epochs]")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("train.pretrain_epochs and train.joint_epochs must be >= 0")
        for name in ("w_L", "w_H", "w_Q", "w_pi", "w_reg", "policy_lr_mult", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("train.dtype must be float32 or float64")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"train.ablation must be one of {ABLATIONS}")


SECTIONS = {
    "data": DataConfig,
    "frame": FrameCpcConfig,
    "segmenter": SegmenterConfig,
    "unit": UnitCpcConfig,
    "train": TrainConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    frame: FrameCpcConfig = field(default_factory=FrameCpcConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    unit: UnitCpcConfig = field(default_factory=UnitCpcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        try:
            for name in SECTIONS:
                sub = getattr(self, name)
                if name == "segmenter":
                    sub.validate(self.data.seq_len_frames)
                else:
                    sub.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.frame.hop != self.data.hop:
            raise ConfigError(
                f"frame.conv_strides product {self.frame.hop} != data.hop {self.data.hop}"
            )
        if self.frame.n_predictions >= self.data.seq_len_frames:
            raise ConfigError("frame.n_predictions must be < data.seq_len_frames")
        return self

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        cfg = cls()
        for section, values in (d or {}).items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section '{section}'")
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{section}' must be a mapping")
            for key, value in values.items():
                set_field(cfg, f"{section}.{key}", value)
        return cfg

    def fingerprint(self, exclude: Iterable[str] = ()) -> str:
        d = self.to_dict()
        for key in exclude:
            section, name = key.split(".")
            d[section].pop(name, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_ablation(self, ablation: str) -> "RunConfig":
        """Copy with an ablation preset applied (and recorded in train.ablation)."""
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation '{ablation}'")
        cfg = RunConfig.from_dict(self.to_dict())
        cfg.train.ablation = ablation
        if ablation == "no_adjacent":
            cfg.unit.negatives = "random"
        elif ablation == "no_reg":
            cfg.train.w_reg = 0.0
        elif ablation == "no_quant":
            cfg.unit.quantize_targets = False
        return cfg


def _coerce(value: Any, target_type, key: str):
    if isinstance(value, str) and target_type is not str:
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f"{key}: cannot parse value {value!r}") from e
    t = target_type if isinstance(target_type, type) else None
    try:
        if target_type in (float, "float"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if target_type in (int, "int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if target_type in (bool, "bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if target_type in (str, "str"):
            return str(value)
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        raise TypeError
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: invalid value {value!r}") from None


def set_field(cfg: RunConfig, key: str, value: Any) -> None:
    """Set ``section.name`` on cfg with type coercion; unknown keys raise ConfigError."""
    if key.count(".") != 1:
        raise ConfigError(f"{key}: expected section.field")
    section, name = key.split(".")
    if section not in SECTIONS:
        raise ConfigError(f"{key}: unknown config section '{section}'")
    sub = getattr(cfg, section)
    types = {f.name: f.type for f in fields(sub)}
    if name not in types:
        raise ConfigError(f"{key}: unknown field '{name}'")
    ftype = types[name]
    if isinstance(ftype, str):
        ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(ftype, ftype)
    setattr(sub, name, _coerce(value, ftype, key))


def load_config(path: Optional[str], overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults <- YAML file <- ``section.field=value`` overrides, then validated."""
    d = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
            raise ConfigError(f"{path}: malformed YAML{where}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = RunConfig.from_dict(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        set_field(cfg, key.strip(), value.strip())
    return cfg.validate()


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
