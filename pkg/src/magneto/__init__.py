"""Gated two-stream tag summarization on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .config import ModelConfig, SyntheticConfig, TadConfig, TrainConfig  # noqa: E402
from .model import ModelKind, build_model, forward  # noqa: E402
from .trainer import evaluate, pretrain_then_finetune, train  # noqa: E402

__all__ = [
    "ModelConfig", "SyntheticConfig", "TadConfig", "TrainConfig",
    "ModelKind", "build_model", "forward",
    "evaluate", "pretrain_then_finetune", "train",
]
