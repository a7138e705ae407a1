"""Mask-aware BCE, soft Dice, BCE-Dice and the composite training objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

BCE_CLAMP = 1e-7
DEFAULT_SMOOTH = 1.0


def _prepare(y_pred: Tensor, y_true, mask):
    y_true = np.asarray(y_true)
    mask = np.asarray(mask, dtype=bool)
    if y_pred.shape != y_true.shape or y_pred.shape != mask.shape:
        raise DimensionError(
            f"prediction {y_pred.shape}, labels {y_true.shape} and mask {mask.shape} must match"
        )
    if not mask.any():
        raise ContractError("loss over an empty mask (no valid slots)")
    return Tensor(np.where(mask, y_true, 0)), mask


def bce(y_pred: Tensor, y_true, mask, clamp: float = BCE_CLAMP) -> Tensor:
    """Mean binary cross-entropy over valid slots."""
    y, mask = _prepare(y_pred, y_true, mask)
    p = T.clip(y_pred, clamp, 1.0 - clamp)
    per_slot = -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p))
    per_slot = T.masked_fill(per_slot, ~mask, 0.0)
    return T.reduce_sum(per_slot) / float(mask.sum())


def dice(y_pred: Tensor, y_true, mask, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """Soft Dice loss per item, averaged over the batch."""
    if not smooth > 0:
        raise ContractError(f"smooth must be > 0, got {smooth}")
    y, mask = _prepare(y_pred, y_true, mask)
    p = T.masked_fill(y_pred, ~mask, 0.0)
    overlap = T.reduce_sum(p * y, axis=-1)
    denom = T.reduce_sum(p, axis=-1) + T.reduce_sum(y, axis=-1) + smooth
    per_item = 1.0 - (overlap * 2.0 + smooth) / denom
    return T.reduce_mean(per_item)


def bce_dice(y_pred: Tensor, y_true, mask, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    return bce(y_pred, y_true, mask) + dice(y_pred, y_true, mask, smooth)


@dataclass
class LossBreakdown:
    total: Tensor
    L_g: float
    L_it: float
    L_t: float
    components: Dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.data)


def _term(name, y_pred, y_true, mask, smooth, parts):
    b = bce(y_pred, y_true, mask)
    d = dice(y_pred, y_true, mask, smooth)
    parts[f"{name}_bce"] = float(b.data)
    parts[f"{name}_dice"] = float(d.data)
    return b + d


def total_loss(outputs, y_true, mask, smooth: float = DEFAULT_SMOOTH) -> LossBreakdown:
    """Gated-output loss plus the two auxiliary stream losses, equally weighted."""
    parts: Dict[str, float] = {}
    l_g = _term("g", outputs.o_final, y_true, mask, smooth, parts)
    l_it = _term("it", outputs.o_it, y_true, mask, smooth, parts)
    l_t = _term("t", outputs.o_t, y_true, mask, smooth, parts)
    total = l_g + l_it + l_t
    return LossBreakdown(total, float(l_g.data), float(l_it.data), float(l_t.data), parts)


def pretrain_loss(o_it: Tensor, o_t: Tensor, y_relevant, mask, smooth: float = DEFAULT_SMOOTH) -> LossBreakdown:
    """Relevance objective of the gate-free model: stream losses only."""
    parts: Dict[str, float] = {}
    l_it = _term("it", o_it, y_relevant, mask, smooth, parts)
    l_t = _term("t", o_t, y_relevant, mask, smooth, parts)
    total = l_it + l_t
    return LossBreakdown(total, 0.0, float(l_it.data), float(l_t.data), parts)


def single_output_loss(y_pred: Tensor, y_true, mask, smooth: float = DEFAULT_SMOOTH,
                       kind: str = "bce_dice") -> LossBreakdown:
    """Loss for models with a single output (baselines), reported as the gated term."""
    if kind == "bce":
        loss = bce(y_pred, y_true, mask)
    else:
        loss = bce_dice(y_pred, y_true, mask, smooth)
    return LossBreakdown(loss, float(loss.data), 0.0, 0.0, {})


def bce_total_loss(outputs, y_true, mask) -> LossBreakdown:
    """BCE-only version of the composite objective (imbalance comparison)."""
    l_g = bce(outputs.o_final, y_true, mask)
    l_it = bce(outputs.o_it, y_true, mask)
    l_t = bce(outputs.o_t, y_true, mask)
    total = l_g + l_it + l_t
    return LossBreakdown(total, float(l_g.data), float(l_it.data), float(l_t.data), {})
