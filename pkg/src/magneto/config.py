"""Configuration records for the model, training, augmentation and synthetic data."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Tuple

from .errors import ConfigurationError

BACKBONES = ("tiny_conv", "precomputed")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    depth_image: int = 1
    depth_tag: int = 2
    d_ff: int = 512
    dropout: float = 0.3
    max_tags: int = 16
    grid_size: int = 4
    vocab_size: int = 82
    backbone: str = "tiny_conv"
    conv_channels: Tuple[int, ...] = (16, 32, 64)
    ff_blocks: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        for key in ("max_tags", "grid_size", "depth_image", "depth_tag", "d_ff", "vocab_size"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ConfigurationError(f"conv_channels must be positive, got {self.conv_channels}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def image_size(self) -> int:
        """Smallest square image side that the tiny_conv stack maps onto the grid."""
        return self.grid_size * 2 ** len(self.conv_channels)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# Small configuration used by gradient checks and fast tests.
TINY_MODEL = ModelConfig(
    d_model=8, heads=2, depth_image=1, depth_tag=1, d_ff=16, dropout=0.0,
    max_tags=4, grid_size=2, vocab_size=10, conv_channels=(4, 4, 4),
)


@dataclass(frozen=True)
class TadConfig:
    beta: float = 0.0
    beta_hat: float = 0.0

    def __post_init__(self):
        for key in ("beta", "beta_hat"):
            v = getattr(self, key)
            if not (v >= 0 and v < float("inf")):
                raise ConfigurationError(f"{key} must be finite and >= 0, got {v}")

    @property
    def enabled(self) -> bool:
        return self.beta > 0 or self.beta_hat > 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    stage: str = "supervised"
    scheduler: str = "plateau"
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    tad: TadConfig = field(default_factory=TadConfig)
    smooth: float = 1.0
    threshold: float = 0.5
    loss: str = "bce_dice"
    pretrain_inject_ratio: float = 0.5
    image_augment: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError(f"plateau factor must lie in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.stage not in ("supervised", "pretrain", "finetune"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.scheduler not in ("none", "plateau"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.loss not in ("bce_dice", "bce"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if not 0 < self.threshold < 1:
            raise ConfigurationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.smooth > 0:
            raise ConfigurationError(f"smooth must be > 0, got {self.smooth}")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 24
    items: int = 2000
    grid_size: int = 3
    cell_px: int = 8
    patterns_min: int = 1
    patterns_max: int = 2
    cells_min: int = 1
    cells_max: int = 4
    distractors_min: int = 1
    distractors_max: int = 3
    threshold: int = 2
    feature_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("distractors_min", "distractors_max", "feature_dim", "seed"):
                if v < 0:
                    raise ConfigurationError(f"{f.name} must be >= 0, got {v}")
            elif v < 1:
                raise ConfigurationError(f"{f.name} must be >= 1, got {v}")
        if self.patterns_min > self.patterns_max or self.cells_min > self.cells_max:
            raise ConfigurationError("min bounds must not exceed max bounds")
        if self.distractors_min > self.distractors_max:
            raise ConfigurationError("distractors_min must not exceed distractors_max")
        if self.patterns_max > self.grid_size ** 2:
            raise ConfigurationError("more painted patterns than grid cells")

    def with_(self, **changes) -> "SyntheticConfig":
        return replace(self, **changes)
