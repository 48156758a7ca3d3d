"""Configuration records and the flat JSON config file format.

A config file is a single flat JSON object whose keys are field names of
:class:`ModelConfig`, :class:`TrainConfig` or :class:`LossConfig`. Keys not
listed are rejected so a typo in a hyperparameter cannot pass silently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 4
    num_queries: int = 10
    num_classes: int = 4
    ffn_hidden: int = 128
    patch_size: int = 8
    image_height: int = 128
    image_width: int = 128

    def __post_init__(self):
        for name in ("d_model", "num_heads", "num_queries", "num_classes", "ffn_hidden", "patch_size",
                     "image_height", "image_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_encoder_layers < 0 or self.num_decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}")
        if self.d_model % 4:
            raise ConfigError(f"d_model {self.d_model} must be divisible by 4 for 2-D positional encoding")
        for dim in ("image_height", "image_width"):
            if getattr(self, dim) % self.patch_size:
                raise ConfigError(f"{dim} {getattr(self, dim)} is not a multiple of patch_size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size


@dataclass(frozen=True)
class LossConfig:
    weight_class: float = 1.0
    weight_l1: float = 5.0
    weight_giou: float = 2.0
    eos_coef: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-5
    lr_backbone: float = 1e-6
    seed: int = 0
    checkpoint_interval: int = 0
    grad_clip: float = 0.1
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be positive")
        if self.checkpoint_interval < 0 or self.eval_every < 0:
            raise ConfigError("intervals must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def flat(self) -> dict:
        out = {}
        for part in (self.model, self.train, self.loss):
            out.update(dataclasses.asdict(part))
        return out

    def replace(self, **overrides) -> "RunConfig":
        return from_flat({**self.flat(), **overrides})


# Full-scale settings; not trainable on a CPU but kept for reference runs.
FULL = RunConfig(
    model=ModelConfig(d_model=256, num_encoder_layers=6, num_decoder_layers=6, num_heads=8, num_queries=100,
                      num_classes=4, ffn_hidden=2048, patch_size=16, image_height=512, image_width=512),
    train=TrainConfig(epochs=50, batch_size=8, lr=1e-5, lr_backbone=1e-6),
)

# Tiny model on 64x64 scenes: about 15 s per epoch of 2,000 images on one CPU core.
DESK = RunConfig(
    model=ModelConfig(image_height=64, image_width=64),
    train=TrainConfig(epochs=60, batch_size=8, lr=5e-4, lr_backbone=5e-4, grad_clip=0.1),
)

PRESETS = {"full": FULL, "desk": DESK}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def from_flat(values: dict) -> RunConfig:
    known = _fields(ModelConfig) | _fields(TrainConfig) | _fields(LossConfig)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(
            model=ModelConfig(**{k: v for k, v in values.items() if k in _fields(ModelConfig)}),
            train=TrainConfig(**{k: v for k, v in values.items() if k in _fields(TrainConfig)}),
            loss=LossConfig(**{k: v for k, v in values.items() if k in _fields(LossConfig)}),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: RunConfig = DESK) -> RunConfig:
    """Read a flat JSON config, layering its keys over ``base``."""
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    nested = [k for k, v in values.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"{path}: config must be flat, nested values under {nested}")
    return base.replace(**values)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.flat(), indent=2, sort_keys=True) + "\n")
