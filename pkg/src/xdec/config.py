"""Configuration dataclasses and (de)serialization helpers.

A full run is described by one `Config` tree. Everything has a desk-scale
default so `Config()` trains the standard toy model; the original
large-scale recipe (lr 1e-4, step decay by 0.1 at ~8/9 and ~26/27 of the
run) stays reachable through `lr_decay_points` / `lr_decay_factor`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import FormatError, InputError


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    depth: int = 3
    num_latent_queries: int = 9  # includes the trailing global query
    text_layers: int = 2
    ffn_ratio: int = 4
    max_text_len: int = 24
    # fine to coarse; finest stride 1 keeps mask supervision at full
    # resolution, which the toy IoU targets need
    strides: tuple[int, ...] = (2, 4, 8)

    def __post_init__(self):
        if self.num_latent_queries < 2:
            raise InputError("need at least 2 latent queries (objects + global)")
        if self.dim % self.heads != 0:
            raise InputError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise InputError("depth must be >= 0")
        if len(self.strides) == 0 or any(s <= 0 for s in self.strides):
            raise InputError(f"bad stride pyramid {self.strides}")
        if list(self.strides) != sorted(self.strides):
            raise InputError("strides must be ordered fine to coarse")
        if self.max_text_len < 3:
            raise InputError("max_text_len must fit at least BOS, one word, EOS")


@dataclass(frozen=True)
class AttentionSwitches:
    """Query-flow toggles. All on reproduces the standard interaction scheme."""

    text_attends_object_latents: bool = True
    text_attends_global: bool = True
    text_attends_text: bool = True
    latent_attends_text: bool = True


@dataclass(frozen=True)
class LossWeights:
    contrastive: float = 1.0
    classification: float = 2.0
    caption: float = 1.0
    bce: float = 5.0
    dice: float = 5.0


@dataclass(frozen=True)
class MatchWeights:
    """Cost coefficients for bipartite mask matching."""

    classification: float = 2.0
    bce: float = 5.0
    dice: float = 5.0


@dataclass(frozen=True)
class DataConfig:
    canvas: int = 64
    min_objects: int = 1
    max_objects: int = 4
    radius_min: int = 7
    radius_max: int = 13
    train_count: int = 256
    eval_count: int = 64

    def __post_init__(self):
        if self.canvas <= 0:
            raise InputError("canvas must be positive")
        if not (1 <= self.min_objects <= self.max_objects):
            raise InputError("need 1 <= min_objects <= max_objects")
        if self.radius_min < 2 or self.radius_max < self.radius_min:
            raise InputError("bad radius range")
        if 2 * self.radius_max + 4 > self.canvas:
            raise InputError("radius_max too large for canvas")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seg_batch: int = 8
    itp_batch: int = 8
    ref_batch: int = 8
    itp_ratio: float = 4.0
    ref_ratio: float = 1.0
    deep_supervision: bool = True
    log_every: int = 25
    # step-decay schedule; empty tuple keeps lr constant
    lr_decay_points: tuple[float, ...] = ()
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if min(self.seg_batch, self.itp_batch, self.ref_batch) < 1:
            raise InputError("batch sizes must be >= 1")
        if self.itp_ratio < 0 or self.ref_ratio < 0:
            raise InputError("task ratios must be >= 0")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    attention: AttentionSwitches = field(default_factory=AttentionSwitches)
    loss: LossWeights = field(default_factory=LossWeights)
    match: MatchWeights = field(default_factory=MatchWeights)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.data.canvas % max(self.model.strides) != 0:
            raise InputError(
                f"canvas {self.data.canvas} not divisible by coarsest stride "
                f"{max(self.model.strides)}"
            )


_SECTIONS = {
    "model": ModelConfig,
    "attention": AttentionSwitches,
    "loss": LossWeights,
    "match": MatchWeights,
    "data": DataConfig,
    "train": TrainConfig,
}

_TUPLE_FIELDS = {"strides", "lr_decay_points"}


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(raw: dict) -> Config:
    """Build a Config from a plain dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise InputError(f"config must be a JSON object, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise InputError(f"config section '{name}' must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - known
        if bad:
            raise InputError(f"unknown keys in config.{name}: {sorted(bad)}")
        kwargs = {}
        for key, value in body.items():
            if key in _TUPLE_FIELDS and isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        try:
            sections[name] = cls(**kwargs)
        except TypeError as exc:
            raise InputError(f"bad config.{name}: {exc}") from exc
    return Config(**sections)


def load_config(path: str) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_hash(cfg: Config) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
