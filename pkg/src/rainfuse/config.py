"""Training configuration: schema, profiles, YAML files and overrides.

Precedence, lowest first: profile defaults, config file, the
``RAINFUSE_CHECKPOINT_DIR`` environment variable (checkpoint directory only),
explicit overrides (CLI flags). A value set at one level is never replaced by
a lower one, so choosing the desk profile cannot clobber something the user
wrote down.

File layout (YAML)::

    profile: desk          # optional, desk | full
    seed: 0
    checkpoint_dir: checkpoints
    manifest_path: data/manifest.csv
    stage1: {iterations: 2000, batch: 8, patch: 64, lr: 1.0e-4, ...}
    stage2: {epochs: 50, lr_fusion: 1.0e-3, cascaded_stages: 3, ...}
    cleannet: {base_channels: 48, ...}
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .cleannet import CleanNetConfig
from .fusion import FusionConfig

CHECKPOINT_ENV = "RAINFUSE_CHECKPOINT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class Stage1Config:
    iterations: int = 2000
    batch: int = 8
    patch: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-2
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.patch < 8 or self.checkpoint_every < 1:
            raise ConfigError("stage1: iterations >= 0, batch >= 1, patch >= 8, checkpoint_every >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("stage1: lr must be > 0 and weight_decay >= 0")


@dataclass
class Stage2Config:
    epochs: int = 50
    lr_fusion: float = 1e-3  # desk value; 1e-4 at full scale
    lr_refine: float = 3e-4
    weight_decay: float = 3e-4
    cascaded_stages: int = 3
    adjust_iterations: int = 3
    alpha: float = 20.0
    beta: float = 1.5
    eps_div: float = 1e-4
    backbone: str = "pyramid"
    backbone_checkpoint: str | None = None
    refine_width: int = 16
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.checkpoint_every < 1 or self.refine_width < 1:
            raise ConfigError("stage2: epochs >= 0, checkpoint_every >= 1, refine_width >= 1")
        if self.lr_fusion <= 0 or self.lr_refine <= 0 or self.weight_decay < 0:
            raise ConfigError("stage2: learning rates must be > 0 and weight_decay >= 0")
        if self.backbone not in ("vgg16", "pyramid", "identity"):
            raise ConfigError(f"stage2: unknown backbone {self.backbone!r}")
        self.fusion_config()

    def fusion_config(self) -> FusionConfig:
        try:
            return FusionConfig(self.cascaded_stages, self.adjust_iterations, self.alpha, self.beta, self.eps_div)
        except ValueError as exc:
            raise ConfigError(f"stage2: {exc}") from exc


@dataclass
class TrainingConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    cleannet: CleanNetConfig = field(default_factory=CleanNetConfig)
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    manifest_path: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainingConfig:
        data = dict(data)
        sections = {"stage1": Stage1Config, "stage2": Stage2Config, "cleannet": CleanNetConfig}
        kwargs = {}
        for name, typ in sections.items():
            sub = data.pop(name, {}) or {}
            _reject_unknown(typ, sub, name)
            kwargs[name] = typ(**sub)
        _reject_unknown(cls, data, "")
        try:
            return cls(**kwargs, **data)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _reject_unknown(typ, data: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}" + (f" in {where}" if where else ""))


# The dataclass defaults are the desk profile. At 50 epochs over a handful of
# pairs FusionNet sees only a few hundred updates, so the desk profile raises
# its learning rate tenfold; the full profile restores the full-scale values.
PROFILES: dict[str, dict[str, Any]] = {
    "desk": {},
    "full": {
        "stage1.iterations": 300_000,
        "stage2.epochs": 500,
        "stage2.lr_fusion": 1e-4,
        "stage2.backbone": "vgg16",
    },
}


def _flatten(data: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _nest(flat: dict[str, Any]) -> dict:
    out: dict = {}
    for key, v in flat.items():
        *parents, leaf = key.split(".")
        node = out
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


def field_types() -> dict[str, type]:
    """Dotted key -> Python type for every leaf of the schema."""
    out = {}
    for name, value in _flatten(TrainingConfig().to_dict()).items():
        out[name] = type(value) if value is not None else str
    return out


def load_config(
    path: str | Path | None = None,
    profile: str | None = None,
    overrides: dict[str, Any] | None = None,
    env: dict[str, str] | None = None,
) -> TrainingConfig:
    env = os.environ if env is None else env
    file_values: dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        profile = profile or raw.pop("profile", None)
        raw.pop("profile", None)
        file_values = _flatten(raw)
    profile = profile or "desk"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")

    merged = _flatten(TrainingConfig().to_dict())
    merged.update(PROFILES[profile])
    merged.update(file_values)
    if env.get(CHECKPOINT_ENV):
        merged["checkpoint_dir"] = env[CHECKPOINT_ENV]
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    return TrainingConfig.from_dict(_nest(_coerce(merged)))


def _coerce(flat: dict[str, Any]) -> dict[str, Any]:
    # YAML 1.1 reads "1e-4" as a string; cast known leaves to their schema type.
    types = field_types()
    out = {}
    for k, v in flat.items():
        typ = types.get(k)
        if v is None or typ is None or isinstance(v, typ) and not (typ is int and isinstance(v, bool)):
            out[k] = v
            continue
        try:
            if typ is int and isinstance(v, float) and not v.is_integer():
                raise ValueError("not an integer")
            out[k] = typ(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{k}: cannot read {v!r} as {typ.__name__}") from exc
    return out


def dump_config(config: TrainingConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
