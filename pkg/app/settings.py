# app/settings.py
"""config.yaml -> validated dataclasses. Sections: train, simulate, eval, mesh."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Type, TypeVar

import yaml

from app.extract import MIN_RESOLUTION
from app.field import FieldSpec
from app.simulator import SimulateConfig
from app.trainer import TrainConfig
from app.utils import ValidationError

DEFAULT_CONFIG_PATH = "config.yaml"
DEFAULT_OUT_DIR = "data"

T = TypeVar("T")


@dataclass
class EvalConfig:
    render_samples: int = 256
    bse_angles: int = 64
    include_ps: bool = True
    ratio_dc: Optional[float] = None
    write_maps: bool = True

    def __post_init__(self) -> None:
        if self.render_samples < 2:
            raise ValidationError("eval.render_samples must be >= 2")
        if self.bse_angles < 1:
            raise ValidationError("eval.bse_angles must be >= 1")
        if self.ratio_dc is not None and self.ratio_dc <= 0:
            raise ValidationError("eval.ratio_dc must be > 0")


@dataclass
class MeshConfig:
    resolution: int = 256

    def __post_init__(self) -> None:
        if self.resolution < MIN_RESOLUTION:
            raise ValidationError(f"mesh.resolution must be >= {MIN_RESOLUTION}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    out_dir: str = DEFAULT_OUT_DIR

    def to_dict(self) -> Dict[str, Any]:
        return {
            "train": self.train.to_dict(),
            "simulate": dataclasses.asdict(self.simulate),
            "eval": dataclasses.asdict(self.eval),
            "mesh": dataclasses.asdict(self.mesh),
            "out_dir": self.out_dir,
        }


def _build(cls: Type[T], raw: Optional[Dict[str, Any]], section: str, **fixed: Any) -> T:
    if raw is not None and not isinstance(raw, dict):
        raise ValidationError(f"config section {section!r} must be a mapping")
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known or key in fixed:
            raise ValidationError(f"unknown key {section}.{key}")
    try:
        return cls(**raw, **fixed)
    except TypeError as e:
        raise ValidationError(f"config section {section!r}: {e}")


def build_train_config(raw: Optional[Dict[str, Any]] = None, **overrides: Any) -> TrainConfig:
    """TrainConfig from a ``train`` mapping (nested ``field`` allowed); CLI overrides win."""
    if raw is not None and not isinstance(raw, dict):
        raise ValidationError("config section 'train' must be a mapping")
    raw = dict(raw or {})
    raw.update({k: v for k, v in overrides.items() if v is not None})
    field_raw = raw.pop("field", None)
    spec = _build(FieldSpec, field_raw, "train.field")
    return _build(TrainConfig, raw, "train", field=spec)


def load_config(path: Optional[str] = None) -> RunConfig:
    """Missing file -> defaults. Unknown sections or keys are rejected by name."""
    if path is None:
        if not os.path.exists(DEFAULT_CONFIG_PATH):
            return RunConfig()
        path = DEFAULT_CONFIG_PATH
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"{path}: invalid YAML: {e}")
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    sections = {"train", "simulate", "eval", "mesh", "out_dir"}
    for key in raw:
        if key not in sections:
            raise ValidationError(f"unknown config section {key!r}")
    return RunConfig(
        train=build_train_config(raw.get("train")),
        simulate=_build(SimulateConfig, raw.get("simulate"), "simulate"),
        eval=_build(EvalConfig, raw.get("eval"), "eval"),
        mesh=_build(MeshConfig, raw.get("mesh"), "mesh"),
        out_dir=str(raw.get("out_dir", DEFAULT_OUT_DIR)),
    )
