"""Typed experiment configuration: YAML in, validated dataclasses out, and back.

Every block is a frozen dataclass from the library modules.  Parsing is
strict: unknown keys and ill-typed values are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml
from pydantic import ConfigDict, TypeAdapter, ValidationError

from essl.augment import AugmentationPolicy
from essl.models import EncoderSpec, ModelSpec, PredictorSpec, ProjectorSpec
from essl.objectives import ESSLObjective
from essl.training import EquivarianceConfig, FinetuneConfig, TrainConfig

EXPERIMENTS = (
    "pretrain", "finetune", "probe", "diagnose", "sweep_sensitivity", "sweep_lambda", "sweep_aug_levels",
    "proposition_check", "relative_orientation",
)
OUTPUT_ROOT_ENV = "ESSL_OUTPUT_ROOT"
DATA_ROOT_ENV = "ESSL_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    kind: str = "image"  # image | toy_images | phc
    root: str | None = None  # converted image dataset; falls back to $ESSL_DATA_ROOT
    train_fraction: float = 1.0
    test_limit: int | None = None
    orientation_bias: str = "canonical_only"
    # toy_images: procedurally generated labelled images for smoke runs
    toy_train: int = 256
    toy_test: int = 128
    toy_classes: int = 4
    # phc
    family: str = "blob"
    n_train: int = 3000
    n_test: int = 2000
    data_seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("image", "toy_images", "phc"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.family not in ("blob", "gpm"):
            raise ValueError(f"unknown cell family {self.family!r}")


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 200
    knn_temperature: float = 0.1
    linear: bool = True
    linear_epochs: int = 100
    linear_lr: float = 30.0
    linear_seeds: int = 5
    rotation_probe: bool = False
    orientation_probe: bool = False
    every: int = 0  # epochs between evaluations; the last epoch is always evaluated


@dataclass(frozen=True)
class SweepConfig:
    transformations: tuple[str, ...] = (
        "four_fold_rotations", "horizontal_flips", "vertical_flips", "jigsaw_2x2", "four_fold_translations",
        "color_inversions", "gaussian_blur_levels",
    )
    lambdas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4, 0.8, 1.6)
    levels: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    methods: tuple[str, ...] = ("issl", "essl")  # which runs sweep_aug_levels makes per level


@dataclass(frozen=True)
class PropositionConfig:
    group: str = "four_fold_translations"
    domain: str = "abstract"  # abstract | image
    num_orbits: int = 3
    encoder: str = "injective"  # injective | invariant | constant
    include_orbit_mates: bool = False
    image_size: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "pretrain"
    name: str = "run"
    source: str = ""  # which published result a preset mirrors, empty for ad-hoc runs
    output_dir: str | None = None
    checkpoint: str | None = None  # input checkpoint for finetune / probe / diagnose
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    objective: ESSLObjective = field(default_factory=ESSLObjective)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    equivariance: EquivarianceConfig = field(default_factory=EquivarianceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    proposition: PropositionConfig = field(default_factory=PropositionConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")

    @property
    def seed(self) -> int:
        return self.train.seed


_STRICT = ConfigDict(extra="forbid")
for _cls in (DataConfig, EvalConfig, SweepConfig, PropositionConfig, ExperimentConfig, ModelSpec, EncoderSpec,
             ProjectorSpec, PredictorSpec, TrainConfig, ESSLObjective, AugmentationPolicy, EquivarianceConfig,
             FinetuneConfig):
    _cls.__pydantic_config__ = _STRICT
_ADAPTER = TypeAdapter(ExperimentConfig)


def from_dict(d: dict | None) -> ExperimentConfig:
    try:
        return _ADAPTER.validate_python(d or {})
    except ValidationError as e:
        raise ConfigError(str(e)) from None


def to_dict(cfg: ExperimentConfig) -> dict:
    return _ADAPTER.dump_python(cfg, mode="json")


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> ExperimentConfig:
    d = yaml.safe_load(text)
    if d is not None and not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    return from_dict(d)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def merge(base: dict, update: dict) -> dict:
    """Recursive dict merge; ``update`` wins."""
    out = dict(base)
    for k, v in update.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars or lists."""
    d = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                if p in node and node[p] is None:
                    node[p] = {}
                else:
                    raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(d)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of everything that affects results (output location excluded)."""
    d = to_dict(cfg)
    d.pop("output_dir", None)
    d.pop("name", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / cfg.name


def replace(cfg, **changes):
    """``dataclasses.replace`` that also accepts ``"block.field"`` keys."""
    nested: dict[str, dict[str, Any]] = {}
    flat = {}
    for k, v in changes.items():
        if "." in k:
            block, sub = k.split(".", 1)
            nested.setdefault(block, {})[sub] = v
        else:
            flat[k] = v
    for block, sub in nested.items():
        flat[block] = replace(flat.get(block, getattr(cfg, block)), **sub)
    return dataclasses.replace(cfg, **flat)
