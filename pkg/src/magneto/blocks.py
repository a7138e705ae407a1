"""Neural building blocks: tag embedder, attention, encoder layer, grid extractor, gate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigurationError, ContractError, DimensionError, VocabularyError
from .params import Initializer, ParamStore
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


@dataclass
class ForwardContext:
    """Per-call evaluation state: train/eval mode, dropout rng, pending buffer updates."""

    mode: str = "eval"
    rng: Optional[np.random.Generator] = None
    buffer_updates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.mode == "train" and self.rng is None:
            self.rng = np.random.default_rng(0)

    @property
    def training(self) -> bool:
        return self.mode == "train"


def _dropout(x, rate, ctx: ForwardContext):
    return T.dropout(x, rate, ctx.training, ctx.rng)


def linear(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    w = store.get_param(f"{prefix}.weight")
    b = store.get_param(f"{prefix}.bias")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return T.apply_primitive("matmul", [x, w]) + b


# --------------------------------------------------------------------------- tag embedder


def init_tag_embedder(init: Initializer, cfg: ModelConfig, prefix="tag_embedder"):
    init.embedding(f"{prefix}.weight", cfg.vocab_size, cfg.d_model)


def embed_tags(ids, store: ParamStore, prefix="tag_embedder") -> Tensor:
    """Look up one embedding row per tag id; id 0 is the zero padding vector."""
    ids = np.asarray(ids)
    table = store.get_param(f"{prefix}.weight")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        raise VocabularyError(f"tag ids {sorted(set(bad.tolist()))} outside vocabulary [0, {table.shape[0]})")
    out = T.embedding_lookup(table, ids, padding_idx=0)
    # padded slots read nothing from the table, not even row 0
    return T.masked_fill(out, (ids == 0)[..., None], 0.0)


# --------------------------------------------------------------------------- attention


def init_attention(init: Initializer, d_model: int, prefix: str):
    for proj in ("q", "k", "v", "o"):
        init.matrix(f"{prefix}.w{proj}", d_model, d_model)
        init.zeros(f"{prefix}.b{proj}", (d_model,))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    bs, s, d = x.shape
    return T.transpose(T.reshape(x, (bs, s, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, key_mask, store: ParamStore,
                         heads: int, prefix: str) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    ``key_mask`` is a boolean (bs, s_k) array marking valid keys; invalid keys
    get a score of -inf before the softmax so their content never reaches the
    output.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"{prefix}: q/k/v widths {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]} differ")
    if k.shape[:2] != v.shape[:2]:
        raise DimensionError(f"{prefix}: keys {k.shape} and values {v.shape} disagree")
    if d % heads:
        raise DimensionError(f"{prefix}: width {d} not divisible by {heads} heads")
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape != k.shape[:2]:
        raise DimensionError(f"{prefix}: key mask {key_mask.shape} does not match keys {k.shape[:2]}")
    if not key_mask.any(axis=-1).all():
        raise ContractError(f"{prefix}: every key is masked for at least one item")

    p = lambda name: store.get_param(f"{prefix}.{name}")  # noqa: E731
    qh = _split_heads(T.apply_primitive("matmul", [q, p("wq")]) + p("bq"), heads)
    kh = _split_heads(T.apply_primitive("matmul", [k, p("wk")]) + p("bk"), heads)
    vh = _split_heads(T.apply_primitive("matmul", [v, p("wv")]) + p("bv"), heads)

    scale = Tensor(1.0 / math.sqrt(d // heads))
    scores = T.apply_primitive("matmul", [qh, T.transpose(kh, (0, 1, 3, 2))]) * scale
    scores = T.masked_fill(scores, ~key_mask[:, None, None, :], -np.inf)
    weights = T.softmax(scores, axis=-1)
    ctx = T.apply_primitive("matmul", [weights, vh])
    bs, _, sq, dh = ctx.shape
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bs, sq, heads * dh))
    return T.apply_primitive("matmul", [merged, p("wo")]) + p("bo")


# --------------------------------------------------------------------------- encoder layer


def init_encoder_layer(init: Initializer, cfg: ModelConfig, prefix: str):
    init_attention(init, cfg.d_model, f"{prefix}.attn")
    init.ones(f"{prefix}.ln1.gain", (cfg.d_model,))
    init.zeros(f"{prefix}.ln1.bias", (cfg.d_model,))
    init.linear(f"{prefix}.ff1", cfg.d_model, cfg.d_ff)
    init.linear(f"{prefix}.ff2", cfg.d_ff, cfg.d_model)
    init.ones(f"{prefix}.ln2.gain", (cfg.d_model,))
    init.zeros(f"{prefix}.ln2.bias", (cfg.d_model,))


def _norm(x, store, prefix):
    return T.layer_norm(x, LN_EPS) * store.get_param(f"{prefix}.gain") + store.get_param(f"{prefix}.bias")


def encoder_layer(x: Tensor, mask, store: ParamStore, cfg: ModelConfig, prefix: str,
                  ctx: ForwardContext) -> Tensor:
    """Post-norm Transformer encoder layer (attention, then feed-forward)."""
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise DimensionError(f"{prefix}: expected (bs, s, {cfg.d_model}), got {x.shape}")
    attn = multi_head_attention(x, x, x, mask, store, cfg.heads, f"{prefix}.attn")
    x = _norm(x + _dropout(attn, cfg.dropout, ctx), store, f"{prefix}.ln1")
    hidden = _dropout(T.relu(linear(x, store, f"{prefix}.ff1")), cfg.dropout, ctx)
    ff = linear(hidden, store, f"{prefix}.ff2")
    return _norm(x + _dropout(ff, cfg.dropout, ctx), store, f"{prefix}.ln2")


def encoder(x, mask, store, cfg, prefix, depth, ctx):
    for i in range(depth):
        x = encoder_layer(x, mask, store, cfg, f"{prefix}.layer{i}", ctx)
    return x


# --------------------------------------------------------------------------- image grid


def init_image_extractor(init: Initializer, cfg: ModelConfig, prefix="image_extractor"):
    if cfg.backbone == "precomputed":
        return
    cin = 3
    for i, cout in enumerate(cfg.conv_channels):
        init.matrix(f"{prefix}.conv{i}.weight", cin * 9, cout * 9, shape=(cout, cin, 3, 3))
        init.zeros(f"{prefix}.conv{i}.bias", (cout,))
        cin = cout
    init.matrix(f"{prefix}.proj.weight", cin, cfg.d_model, shape=(cfg.d_model, cin, 1, 1))
    init.zeros(f"{prefix}.proj.bias", (cfg.d_model,))
    init.ones(f"{prefix}.bn.gamma", (cfg.d_model,))
    init.zeros(f"{prefix}.bn.beta", (cfg.d_model,))
    init.zeros(f"{prefix}.bn.running_mean", (cfg.d_model,), trainable=False)
    init.ones(f"{prefix}.bn.running_var", (cfg.d_model,), trainable=False)


def reduced_size(size: int, n_layers: int) -> int:
    for _ in range(n_layers):
        size = (size + 2 - 3) // 2 + 1
    return size


def image_grid_features(images, store: ParamStore, cfg: ModelConfig, ctx: ForwardContext,
                        prefix="image_extractor") -> Tensor:
    """Map images (bs, 3, H, W) or precomputed grids (bs, G*G, d_model) to grid vectors."""
    g = cfg.grid_size
    if cfg.backbone == "precomputed":
        grid = images if isinstance(images, Tensor) else Tensor(images)
        if grid.ndim != 3 or grid.shape[1:] != (g * g, cfg.d_model):
            raise ConfigurationError(
                f"precomputed features must have shape (bs, {g * g}, {cfg.d_model}), got {grid.shape}"
            )
        return grid

    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ConfigurationError(f"tiny_conv expects images shaped (bs, 3, H, W), got {x.shape}")
    n = len(cfg.conv_channels)
    if reduced_size(x.shape[2], n) != g or reduced_size(x.shape[3], n) != g:
        raise ConfigurationError(
            f"image size {x.shape[2:]} does not reduce to a {g}x{g} grid under {n} stride-2 convolutions"
        )
    for i in range(n):
        w = store.get_param(f"{prefix}.conv{i}.weight")
        b = store.get_param(f"{prefix}.conv{i}.bias")
        x = T.relu(T.conv2d(x, w, stride=2, padding=1) + T.reshape(b, (1, -1, 1, 1)))
    w = store.get_param(f"{prefix}.proj.weight")
    b = store.get_param(f"{prefix}.proj.bias")
    x = T.conv2d(x, w) + T.reshape(b, (1, -1, 1, 1))

    rm_name, rv_name = f"{prefix}.bn.running_mean", f"{prefix}.bn.running_var"
    if ctx.training:
        normed = T.batch_norm(x, "train", eps=BN_EPS)
        axes = (0, 2, 3)
        count = x.data.size // x.shape[1]
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes) * (count / max(count - 1, 1))
        rm = store.get_param(rm_name).data
        rv = store.get_param(rv_name).data
        ctx.buffer_updates[rm_name] = ((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * batch_mean).astype(rm.dtype)
        ctx.buffer_updates[rv_name] = ((1 - BN_MOMENTUM) * rv + BN_MOMENTUM * batch_var).astype(rv.dtype)
    else:
        normed = T.batch_norm(
            x, "eval", store.get_param(rm_name).data, store.get_param(rv_name).data, eps=BN_EPS
        )
    gamma = T.reshape(store.get_param(f"{prefix}.bn.gamma"), (1, -1, 1, 1))
    beta = T.reshape(store.get_param(f"{prefix}.bn.beta"), (1, -1, 1, 1))
    x = normed * gamma + beta
    bs, d = x.shape[:2]
    return T.transpose(T.reshape(x, (bs, d, g * g)), (0, 2, 1))


# --------------------------------------------------------------------------- gate


def init_gating_head(init: Initializer, cfg: ModelConfig, prefix="gate"):
    init.linear(f"{prefix}.fc1", 2 * cfg.d_model, cfg.d_ff)
    init.linear(f"{prefix}.fc2", cfg.d_ff, 1)


def gating_head(features: Tensor, mask, store: ParamStore, cfg: ModelConfig, ctx: ForwardContext,
                prefix="gate") -> Tensor:
    """Dropout, FC(2d -> d_ff), ReLU, Dropout, FC(d_ff -> 1), squeeze, sigmoid."""
    if features.ndim != 3 or features.shape[-1] != 2 * cfg.d_model:
        raise DimensionError(
            f"gating head expects (bs, l, {2 * cfg.d_model}) features, got {features.shape}"
        )
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != features.shape[:2]:
        raise DimensionError(f"gating head: mask {mask.shape} does not match {features.shape[:2]}")
    x = _dropout(features, cfg.dropout, ctx)
    x = T.relu(linear(x, store, f"{prefix}.fc1"))
    x = _dropout(x, cfg.dropout, ctx)
    x = linear(x, store, f"{prefix}.fc2")
    bs, l, _ = x.shape
    return T.sigmoid(T.reshape(x, (bs, l)))


# --------------------------------------------------------------------------- scoring heads


def init_scoring_head(init: Initializer, cfg: ModelConfig, prefix: str):
    init.linear(prefix, cfg.d_model, 1)


def scoring_head(x: Tensor, mask, store: ParamStore, prefix: str) -> Tensor:
    """Per-slot probability; padded slots are forced to 0."""
    bs, l, _ = x.shape
    s = T.sigmoid(T.reshape(linear(x, store, prefix), (bs, l)))
    return T.masked_fill(s, ~np.asarray(mask, dtype=bool), 0.0)
