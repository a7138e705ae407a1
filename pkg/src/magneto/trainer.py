"""SGD with momentum, plateau scheduling, and the one- and two-stage training loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses
from .blocks import ForwardContext
from .config import ModelConfig, TrainConfig
from .data import Batch, TaggedItem, TagVocabulary, augment_images, pad_and_batch
from .errors import NonFiniteLossError, ParameterError
from .metrics import Metrics, binarize, outlier_pick_rate, prf1
from .model import ModelKind, build_model, copy_pretrained, forward, forward_baseline, forward_pretrain, predict_scores
from .params import ParamStore
from .tad import augment_all, inject_irrelevant
from .tensor import GradientTable, backward

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "lr", "L_Total", "L_g", "L_it", "L_t", "mean_alpha",
                   "val_precision", "val_recall", "val_f1"]


def sgd_step(store: ParamStore, grads: GradientTable, lr: float, momentum: float,
             velocity: Dict[str, np.ndarray]):
    """v <- momentum * v + g ; p <- p - lr * v for every trainable parameter.

    Parameters without a gradient entry are treated as having zero gradient.
    """
    for name, p in list(store.trainable_items()):
        g = grads.get(name)
        v = velocity.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ParameterError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {p.shape}")
        if v is not None and v.shape != p.shape:
            raise ParameterError(f"velocity for {name!r} has shape {v.shape}, parameter {p.shape}")
        if g is None and v is None:
            continue
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        v = g.copy() if v is None else (p.dtype.type(momentum) * v + g)
        velocity[name] = v
        store.replace(name, p.data - p.dtype.type(lr) * v)
    return store, velocity


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored metric
    (higher is better) has failed to improve for more than ``patience`` epochs."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainHistory:
    rows: List[dict] = field(default_factory=list)

    def column(self, key):
        return [r[key] for r in self.rows]

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in HISTORY_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        with open(path, encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = [{k: (int(v) if k == "epoch" else (float(v) if v else math.nan)) for k, v in r.items()}
                    for r in reader]
        return cls(rows)


def _fmt(v):
    if isinstance(v, int):
        return str(v)
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


# --------------------------------------------------------------------------- evaluation


@dataclass
class Predictions:
    scores: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    outliers: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None


def predict(kind, items: Sequence[TaggedItem], store: ParamStore, cfg: ModelConfig,
            batch_size: int = 64, outlier_flags=None) -> Predictions:
    kind = ModelKind.parse(kind)
    batches = pad_and_batch(items, cfg.max_tags, batch_size, strict=outlier_flags is not None,
                            outlier_flags=outlier_flags)
    scores, labels, masks, outliers, alphas = [], [], [], [], []
    for b in batches:
        s, streams = predict_scores(kind, b, store, cfg)
        scores.append(s.data)
        labels.append(b.labels)
        masks.append(b.mask)
        if b.outliers is not None:
            outliers.append(b.outliers)
        if streams is not None:
            alphas.append(streams.alpha.data)
    return Predictions(
        np.concatenate(scores), np.concatenate(labels), np.concatenate(masks),
        np.concatenate(outliers) if outliers else None,
        np.concatenate(alphas) if alphas else None,
    )


def evaluate(kind, items, store, cfg: ModelConfig, threshold: float = 0.5, batch_size: int = 64,
             outlier_flags=None) -> Metrics:
    pr = predict(kind, items, store, cfg, batch_size, outlier_flags)
    pred = binarize(pr.scores, threshold, pr.mask)
    m = prf1(pred, pr.labels, pr.mask)
    if pr.outliers is not None and pr.outliers.any():
        m.outlier_item_rate = outlier_pick_rate(pred, pr.outliers, pr.mask)
    return m


# --------------------------------------------------------------------------- training


def _batch_loss(kind: ModelKind, batch: Batch, store, cfg: ModelConfig, tcfg: TrainConfig, ctx):
    """Returns (LossBreakdown, mean alpha over valid slots or nan)."""
    if kind is ModelKind.MAGNETO:
        out = forward(batch, store, cfg, ctx=ctx)
        if tcfg.loss == "bce":
            br = losses.bce_total_loss(out, batch.labels, batch.mask)
        else:
            br = losses.total_loss(out, batch.labels, batch.mask, tcfg.smooth)
        return br, float(out.alpha.data[batch.mask].mean())
    if kind is ModelKind.MAGNETO_PRETRAIN:
        o_it, o_t = forward_pretrain(batch, store, cfg, ctx=ctx)
        return losses.pretrain_loss(o_it, o_t, batch.labels, batch.mask, tcfg.smooth), math.nan
    out = forward_baseline(kind, batch, store, cfg, ctx=ctx)
    return losses.single_output_loss(out, batch.labels, batch.mask, tcfg.smooth, tcfg.loss), math.nan


def train(kind, train_items: Sequence[TaggedItem], val_items: Optional[Sequence[TaggedItem]],
          model_cfg: ModelConfig, cfg: TrainConfig, vocab: TagVocabulary,
          store: Optional[ParamStore] = None) -> Tuple[ParamStore, TrainHistory]:
    """Run ``cfg.epochs`` epochs of minibatch SGD; deterministic given ``cfg.seed``.

    In the pretrain stage every epoch re-labels the data for relevance
    detection: original tags 1, freshly injected foreign tags 0.  Otherwise
    tag adding & dropping is applied to the training split when enabled.
    """
    kind = ModelKind.parse(kind)
    rng = np.random.default_rng(cfg.seed)
    store = build_model(kind, model_cfg, seed=cfg.seed) if store is None else store.copy()
    velocity: Dict[str, np.ndarray] = {}
    scheduler = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    lr = cfg.lr
    l = model_cfg.max_tags
    pretraining = cfg.stage == "pretrain"

    if pretraining and val_items:
        val_items = inject_irrelevant(val_items, vocab, cfg.pretrain_inject_ratio,
                                      np.random.default_rng([cfg.seed, 7]), max_tags=l)
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        if pretraining:
            items = inject_irrelevant(train_items, vocab, cfg.pretrain_inject_ratio, rng, max_tags=l)
        else:
            items = augment_all(train_items, vocab, cfg.tad, rng, max_tags=l)
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        sums = {"L_Total": 0.0, "L_g": 0.0, "L_it": 0.0, "L_t": 0.0}
        alpha_sum, n_batches = 0.0, 0
        for b_idx, batch in enumerate(pad_and_batch(items, l, cfg.batch_size, strict=False)):
            if cfg.image_augment and batch.images is not None:
                batch.images = augment_images(batch.images, rng)
            ctx = ForwardContext("train", rng)
            br, mean_alpha = _batch_loss(kind, batch, store, model_cfg, cfg, ctx)
            total = br.value
            if not math.isfinite(total):
                raise NonFiniteLossError(epoch, b_idx, total)
            grads = backward(br.total)
            sgd_step(store, grads, lr, cfg.momentum, velocity)
            for name, value in ctx.buffer_updates.items():
                store.replace(name, value)
            sums["L_Total"] += total
            sums["L_g"] += br.L_g
            sums["L_it"] += br.L_it
            sums["L_t"] += br.L_t
            alpha_sum += mean_alpha
            n_batches += 1
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        row["mean_alpha"] = alpha_sum / max(n_batches, 1)
        if val_items:
            m = evaluate(kind, val_items, store, model_cfg, cfg.threshold)
            row.update(val_precision=m.precision, val_recall=m.recall, val_f1=m.f1)
            if cfg.scheduler == "plateau":
                lr = scheduler.step(m.f1)
        else:
            row.update(val_precision=math.nan, val_recall=math.nan, val_f1=math.nan)
        history.rows.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_f1 %.4f", epoch, row["lr"], row["L_Total"], row["val_f1"])
    return store, history


def pretrain_then_finetune(unlabeled: Sequence[TaggedItem], labeled: Sequence[TaggedItem],
                           val_items: Optional[Sequence[TaggedItem]], model_cfg: ModelConfig,
                           cfg_pre: TrainConfig, cfg_ft: TrainConfig, vocab: TagVocabulary,
                           on_finetune_start: Optional[Callable[[ParamStore, ParamStore], None]] = None):
    """Relevance pre-training of the gate-free model, then supervised fine-tuning.

    Stage two starts from a freshly built gated model whose embedder,
    extractor, cross-attention and both encoders are copied from stage one;
    nothing is frozen.  Returns ``(store, (history_pre, history_ft))``.
    """
    pre_store, h_pre = train(ModelKind.MAGNETO_PRETRAIN, unlabeled, val_items, model_cfg,
                             cfg_pre.with_(stage="pretrain"), vocab)
    fresh = build_model(ModelKind.MAGNETO, model_cfg, seed=cfg_ft.seed)
    start = copy_pretrained(pre_store, fresh)
    if on_finetune_start is not None:
        on_finetune_start(pre_store, start)
    store, h_ft = train(ModelKind.MAGNETO, labeled, val_items, model_cfg,
                        cfg_ft.with_(stage="finetune"), vocab, store=start)
    return store, (h_pre, h_ft)
