"""Thresholding, precision/recall/F1 and the outlier pick rate."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_THRESHOLD = 0.5


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    outlier_item_rate: Optional[float] = None

    def as_row(self):
        return asdict(self)


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def binarize(scores, threshold: float = DEFAULT_THRESHOLD, mask=None) -> np.ndarray:
    """1 where score >= threshold on a valid slot, else 0."""
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    scores = np.asarray(scores)
    pred = (scores >= threshold).astype(np.int64)
    if mask is not None:
        pred = pred * np.asarray(mask, dtype=bool)
    return pred


def _ratio(num, den, empty):
    return num / den if den else empty


def prf1(pred, truth, mask) -> Metrics:
    """Micro scores pool TP/FP/FN over every valid slot; macro averages per-item scores.

    Per-item precision (recall) with no predicted (true) positives counts as 1
    when the item also has no true (predicted) positives, else 0.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape or pred.shape != mask.shape:
        raise DimensionError(f"pred {pred.shape}, truth {truth.shape}, mask {mask.shape} differ")
    if not mask.any():
        raise ContractError("no valid slots to score")
    tp_slots = pred & truth & mask
    fp_slots = pred & ~truth & mask
    fn_slots = ~pred & truth & mask
    tp, fp, fn = int(tp_slots.sum()), int(fp_slots.sum()), int(fn_slots.sum())
    precision = _ratio(tp, tp + fp, 0.0)
    recall = _ratio(tp, tp + fn, 0.0)

    item_rows = mask.any(axis=1)
    tp_i = tp_slots.sum(axis=1)[item_rows]
    fp_i = fp_slots.sum(axis=1)[item_rows]
    fn_i = fn_slots.sum(axis=1)[item_rows]
    perfect = (tp_i + fp_i + fn_i) == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        p_i = np.where(tp_i + fp_i > 0, tp_i / np.maximum(tp_i + fp_i, 1), np.where(fn_i == 0, 1.0, 0.0))
        r_i = np.where(tp_i + fn_i > 0, tp_i / np.maximum(tp_i + fn_i, 1), np.where(fp_i == 0, 1.0, 0.0))
        f_i = np.where(perfect, 1.0, 2 * tp_i / np.maximum(2 * tp_i + fp_i + fn_i, 1))
    return Metrics(
        precision=float(precision),
        recall=float(recall),
        f1=float(f1_score(precision, recall)),
        macro_precision=float(p_i.mean()),
        macro_recall=float(r_i.mean()),
        macro_f1=float(f_i.mean()),
    )


def outlier_pick_rate(pred, outlier_flags, mask) -> float:
    """Percentage of outlier-bearing items where some outlier was predicted important."""
    pred = np.asarray(pred).astype(bool)
    flags = np.asarray(outlier_flags, dtype=bool) & np.asarray(mask, dtype=bool)
    bearing = flags.any(axis=1)
    if not bearing.any():
        raise ContractError("no item carries an outlier")
    affected = (pred & flags).any(axis=1) & bearing
    return 100.0 * int(affected.sum()) / int(bearing.sum())


METRIC_COLUMNS = ["run_id", "split", "precision", "recall", "f1", "macro_precision",
                  "macro_recall", "macro_f1", "outlier_item_rate"]


def write_metrics_csv(path, rows) -> None:
    """``rows`` is an iterable of (run_id, split, Metrics)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for run_id, split, m in rows:
            d = m.as_row()
            w.writerow([run_id, split] + [
                "" if d[c] is None else repr(float(d[c])) for c in METRIC_COLUMNS[2:]
            ])
