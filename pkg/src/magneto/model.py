"""Two-stream gated model, its gate-free pre-training variant, and the baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, ParameterError
from .params import Initializer, ParamStore
from .tensor import Tensor


class ModelKind(str, enum.Enum):
    MAGNETO = "MAGNETO"
    MAGNETO_PRETRAIN = "MAGNETO_PRETRAIN"
    FF = "FF"
    TF_T = "TF_T"
    TF_IT = "TF_IT"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper().replace("-", "_"))
        except ValueError:
            raise ContractError(f"unknown model kind {value!r}") from None


# Blocks carried over from the pre-trained model into the gated model.
PRETRAINED_BLOCKS = ("image_extractor", "tag_embedder", "cross_attention", "image_encoder", "tag_encoder")


@dataclass
class StreamOutputs:
    o_it: Tensor
    o_t: Tensor
    alpha: Tensor
    o_final: Tensor
    mask: np.ndarray

    def arrays(self):
        return {k: getattr(self, k).data for k in ("o_it", "o_t", "alpha", "o_final")}


def build_model(kind, cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Create the parameter schema of ``kind`` with seeded initial values."""
    kind = ModelKind.parse(kind)
    store = ParamStore()
    init = Initializer(store, np.random.default_rng(seed))
    B.init_tag_embedder(init, cfg)
    if kind is ModelKind.FF:
        for i in range(cfg.ff_blocks):
            init.linear(f"ff.block{i}.fc1", cfg.d_model, cfg.d_ff)
            init.linear(f"ff.block{i}.fc2", cfg.d_ff, cfg.d_model)
        B.init_scoring_head(init, cfg, "tag_head")
        return store
    if kind is ModelKind.TF_T:
        _init_encoder(init, cfg, "tag_encoder", cfg.depth_tag)
        B.init_scoring_head(init, cfg, "tag_head")
        return store

    B.init_image_extractor(init, cfg)
    B.init_attention(init, cfg.d_model, "cross_attention")
    _init_encoder(init, cfg, "image_encoder", cfg.depth_image)
    if kind is ModelKind.TF_IT:
        B.init_scoring_head(init, cfg, "image_head")
        return store
    _init_encoder(init, cfg, "tag_encoder", cfg.depth_tag)
    B.init_scoring_head(init, cfg, "image_head")
    B.init_scoring_head(init, cfg, "tag_head")
    if kind is ModelKind.MAGNETO:
        B.init_gating_head(init, cfg)
    return store


def _init_encoder(init, cfg, prefix, depth):
    for i in range(depth):
        B.init_encoder_layer(init, cfg, f"{prefix}.layer{i}")


def _context(mode, rng, ctx) -> B.ForwardContext:
    if ctx is not None:
        return ctx
    return B.ForwardContext(mode=mode, rng=rng)


def _check_batch(batch, cfg):
    ids = np.asarray(batch.tag_ids)
    mask = np.asarray(batch.mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ContractError(f"tag ids {ids.shape} and mask {mask.shape} must be equal (bs, l) matrices")
    if not mask.any(axis=1).all():
        raise ContractError("every item in a batch needs at least one tag")
    return ids, mask


def _image_input(batch, cfg):
    src = batch.features if cfg.backbone == "precomputed" else batch.images
    if src is None:
        raise ContractError(f"batch carries no input for backbone {cfg.backbone!r}")
    return src


def _streams(batch, store, cfg, ctx):
    ids, mask = _check_batch(batch, cfg)
    emb = B.embed_tags(ids, store)
    tag_hidden = B.encoder(emb, mask, store, cfg, "tag_encoder", cfg.depth_tag, ctx)
    grid = B.image_grid_features(_image_input(batch, cfg), store, cfg, ctx)
    grid_mask = np.ones(grid.shape[:2], dtype=bool)
    fused = B.multi_head_attention(emb, grid, grid, grid_mask, store, cfg.heads, "cross_attention")
    image_hidden = B.encoder(fused, mask, store, cfg, "image_encoder", cfg.depth_image, ctx)
    o_it = B.scoring_head(image_hidden, mask, store, "image_head")
    o_t = B.scoring_head(tag_hidden, mask, store, "tag_head")
    return mask, image_hidden, tag_hidden, o_it, o_t


def forward(batch, store: ParamStore, cfg: ModelConfig, mode: str = "eval",
            rng: Optional[np.random.Generator] = None, ctx: Optional[B.ForwardContext] = None) -> StreamOutputs:
    """Both streams, the gate, and the fused score ``a*O_it + (1-a)*O_t``."""
    ctx = _context(mode, rng, ctx)
    if "gate.fc1.weight" not in store:
        raise ParameterError("parameter store has no gating head; use forward_pretrain")
    mask, image_hidden, tag_hidden, o_it, o_t = _streams(batch, store, cfg, ctx)
    features = T.concat([image_hidden, tag_hidden], axis=-1)
    alpha = B.gating_head(features, mask, store, cfg, ctx)
    o_final = alpha * o_it + (1.0 - alpha) * o_t
    return StreamOutputs(o_it=o_it, o_t=o_t, alpha=alpha, o_final=o_final, mask=mask)


def forward_pretrain(batch, store: ParamStore, cfg: ModelConfig, mode: str = "eval",
                     rng: Optional[np.random.Generator] = None, ctx: Optional[B.ForwardContext] = None):
    """Gate-free two-output variant; returns (O_it, O_t)."""
    ctx = _context(mode, rng, ctx)
    _, _, _, o_it, o_t = _streams(batch, store, cfg, ctx)
    return o_it, o_t


def forward_baseline(kind, batch, store: ParamStore, cfg: ModelConfig, mode: str = "eval",
                     rng=None, ctx: Optional[B.ForwardContext] = None) -> Tensor:
    kind = ModelKind.parse(kind)
    ctx = _context(mode, rng, ctx)
    ids, mask = _check_batch(batch, cfg)
    emb = B.embed_tags(ids, store)
    if kind is ModelKind.FF:
        x = emb
        for i in range(cfg.ff_blocks):
            h = B._dropout(T.relu(B.linear(x, store, f"ff.block{i}.fc1")), cfg.dropout, ctx)
            x = x + B.linear(h, store, f"ff.block{i}.fc2")
        return B.scoring_head(x, mask, store, "tag_head")
    if kind is ModelKind.TF_T:
        h = B.encoder(emb, mask, store, cfg, "tag_encoder", cfg.depth_tag, ctx)
        return B.scoring_head(h, mask, store, "tag_head")
    if kind is ModelKind.TF_IT:
        grid = B.image_grid_features(_image_input(batch, cfg), store, cfg, ctx)
        grid_mask = np.ones(grid.shape[:2], dtype=bool)
        fused = B.multi_head_attention(emb, grid, grid, grid_mask, store, cfg.heads, "cross_attention")
        h = B.encoder(fused, mask, store, cfg, "image_encoder", cfg.depth_image, ctx)
        return B.scoring_head(h, mask, store, "image_head")
    raise ContractError(f"{kind.value} is not a baseline")


def predict_scores(kind, batch, store, cfg, ctx: Optional[B.ForwardContext] = None):
    """Final per-slot score of any model kind, plus stream outputs when available."""
    kind = ModelKind.parse(kind)
    ctx = ctx or B.ForwardContext("eval")
    if kind is ModelKind.MAGNETO:
        out = forward(batch, store, cfg, ctx=ctx)
        return out.o_final, out
    if kind is ModelKind.MAGNETO_PRETRAIN:
        o_it, o_t = forward_pretrain(batch, store, cfg, ctx=ctx)
        return (o_it + o_t) * 0.5, None
    return forward_baseline(kind, batch, store, cfg, ctx=ctx), None


def copy_pretrained(src: ParamStore, dst: ParamStore) -> ParamStore:
    """Copy of ``dst`` with the pre-trainable blocks taken from ``src``.

    Gate and scoring heads keep the values already in ``dst``.
    """
    wanted = [n for n in dst if n.split(".", 1)[0] in PRETRAINED_BLOCKS]
    missing = [n for n in wanted if n not in src]
    mismatched = [n for n in wanted if n in src and src[n].shape != dst[n].shape]
    if missing or mismatched:
        raise ParameterError(
            f"pre-trained store does not match: missing {missing}, shape mismatch {mismatched}"
        )
    out = dst.copy()
    for n in wanted:
        out.replace(n, src[n].data.copy())
    return out


def copied_names(store: ParamStore):
    return [n for n in store if n.split(".", 1)[0] in PRETRAINED_BLOCKS]
