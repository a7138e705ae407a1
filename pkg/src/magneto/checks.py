"""Finite-difference checks for every block and the full training objective."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import blocks as B
from . import losses
from . import tensor as T
from .config import TINY_MODEL, ModelConfig
from .data import Batch
from .gradcheck import CheckReport, finite_difference_check
from .model import ModelKind, build_model, forward, forward_pretrain
from .params import Initializer, ParamStore
from .tensor import Tensor, precision


def _probe(shape, rng):
    # random read-out weights so no coordinate sits on a symmetric zero
    return Tensor(rng.normal(size=shape))


def _readout(out: Tensor, weights: Tensor) -> Tensor:
    return T.reduce_sum(out * weights)


def tiny_batch(cfg: ModelConfig, seed: int = 0, bs: int = 2) -> Batch:
    """A small ragged batch with at least one padded slot per row but the first."""
    rng = np.random.default_rng([seed, 11])
    l = cfg.max_tags
    ids = np.zeros((bs, l), dtype=np.int64)
    for r in range(bs):
        n = l if r == 0 else max(1, l - r)
        ids[r, :n] = rng.choice(np.arange(1, cfg.vocab_size), size=n, replace=False)
    mask = ids != 0
    labels = (rng.random((bs, l)) < 0.5).astype(np.float64) * mask
    labels[:, 0] = 1.0
    if cfg.backbone == "precomputed":
        feats = rng.normal(size=(bs, cfg.grid_size ** 2, cfg.d_model))
        return Batch(ids, labels, mask, features=feats)
    side = cfg.image_size
    images = rng.normal(size=(bs, 3, side, side))
    return Batch(ids, labels, mask, images=images)


def _block_cases(cfg: ModelConfig, seed: int):
    """Yield (name, store, build) for each block in isolation."""
    rng = np.random.default_rng([seed, 5])
    batch = tiny_batch(cfg, seed)
    bs, l = batch.tag_ids.shape
    d = cfg.d_model
    g2 = cfg.grid_size ** 2

    def fresh():
        store = ParamStore()
        return store, Initializer(store, np.random.default_rng(seed))

    store, init = fresh()
    B.init_tag_embedder(init, cfg)
    w = _probe((bs, l, d), rng)
    yield "tag_embedder", store, lambda s, w=w: _readout(B.embed_tags(batch.tag_ids, s), w)

    store, init = fresh()
    B.init_attention(init, d, "attn")
    q = Tensor(rng.normal(size=(bs, l, d)))
    kv = Tensor(rng.normal(size=(bs, l + 1, d)))
    key_mask = np.ones((bs, l + 1), dtype=bool)
    key_mask[1, -2:] = False
    w = _probe((bs, l, d), rng)
    yield "attention", store, lambda s, w=w: _readout(
        B.multi_head_attention(q, kv, kv, key_mask, s, cfg.heads, "attn"), w)

    store, init = fresh()
    B.init_encoder_layer(init, cfg, "enc")
    x = Tensor(rng.normal(size=(bs, l, d)))
    w = _probe((bs, l, d), rng)
    yield "encoder_layer", store, lambda s, w=w: _readout(
        B.encoder_layer(x, batch.mask, s, cfg, "enc", B.ForwardContext("eval")), w)

    if cfg.backbone == "tiny_conv":
        store, init = fresh()
        B.init_image_extractor(init, cfg)
        w = _probe((bs, g2, d), rng)
        yield "image_extractor", store, lambda s, w=w: _readout(
            B.image_grid_features(batch.images, s, cfg, B.ForwardContext("train", np.random.default_rng(0))), w)

    store, init = fresh()
    B.init_gating_head(init, cfg)
    feats = Tensor(rng.normal(size=(bs, l, 2 * d)))
    w = _probe((bs, l), rng)
    yield "gating_head", store, lambda s, w=w: _readout(
        B.gating_head(feats, batch.mask, s, cfg, B.ForwardContext("eval")), w)

    store, init = fresh()
    B.init_scoring_head(init, cfg, "head")
    x2 = Tensor(rng.normal(size=(bs, l, d)))
    w = _probe((bs, l), rng)
    yield "scoring_head", store, lambda s, w=w: _readout(B.scoring_head(x2, batch.mask, s, "head"), w)


def _model_cases(cfg: ModelConfig, seed: int):
    batch = tiny_batch(cfg, seed)

    def ctx():
        # train mode exercises batch statistics; dropout is whatever cfg says
        return B.ForwardContext("train", np.random.default_rng([seed, 3]))

    store = build_model(ModelKind.MAGNETO, cfg, seed=seed)
    yield "magneto+total_loss", store, lambda s: losses.total_loss(
        forward(batch, s, cfg, ctx=ctx()), batch.labels, batch.mask).total

    store = build_model(ModelKind.MAGNETO_PRETRAIN, cfg, seed=seed)

    def pre(s):
        o_it, o_t = forward_pretrain(batch, s, cfg, ctx=ctx())
        return losses.pretrain_loss(o_it, o_t, batch.labels, batch.mask).total

    yield "magneto_pretrain+pretrain_loss", store, pre


def gradient_suite(cfg: ModelConfig = TINY_MODEL, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                   include_model: bool = True,
                   progress: Callable[[str, CheckReport], None] = None) -> Dict[str, CheckReport]:
    """Run the finite-difference check on every block, then on the full objectives."""
    reports: Dict[str, CheckReport] = {}
    with precision("float64"):
        cases = list(_block_cases(cfg, seed))
        if include_model:
            cases += list(_model_cases(cfg, seed))
        for name, store, build in cases:
            rep = finite_difference_check(build, store, eps=eps, tol=tol)
            reports[name] = rep
            if progress is not None:
                progress(name, rep)
    return reports
