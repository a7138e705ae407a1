import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magneto import blocks as B
from magneto.config import TINY_MODEL, ModelConfig
from magneto.errors import ConfigurationError, ContractError, DimensionError, VocabularyError
from magneto.params import Initializer, ParamStore
from magneto.tensor import Tensor, precision

CFG = TINY_MODEL.with_(d_model=8, heads=2, max_tags=5)


def fresh(seed=0):
    store = ParamStore()
    return store, Initializer(store, np.random.default_rng(seed))


def eval_ctx():
    return B.ForwardContext("eval")


def test_embed_pad_shape_and_repeats():
    store, init = fresh()
    B.init_tag_embedder(init, CFG)
    ids = np.array([[1, 3, 3, 0], [2, 0, 0, 0]])
    out = B.embed_tags(ids, store).data
    assert out.shape == (2, 4, CFG.d_model)
    assert not out[0, 3].any() and not out[1, 1:].any()
    np.testing.assert_array_equal(out[0, 1], out[0, 2])


def test_embed_rejects_out_of_range():
    store, init = fresh()
    B.init_tag_embedder(init, CFG)
    with pytest.raises(VocabularyError):
        B.embed_tags(np.array([[1, CFG.vocab_size]]), store)
    with pytest.raises(VocabularyError):
        B.embed_tags(np.array([[-1]]), store)


def _identity_attention(d):
    store, init = fresh()
    B.init_attention(init, d, "a")
    for p in ("wv", "wo"):
        store.replace(f"a.{p}", np.eye(d, dtype=np.float32))
    return store


def test_single_unmasked_key_returns_its_value(rng):
    d = 4
    store = _identity_attention(d)
    q = Tensor(rng.normal(size=(1, 2, d)))
    kv = Tensor(rng.normal(size=(1, 3, d)))
    mask = np.array([[False, True, False]])
    out = B.multi_head_attention(q, kv, kv, mask, store, 2, "a").data
    np.testing.assert_allclose(out[0, 0], kv.data[0, 1], rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], kv.data[0, 1], rtol=1e-6)


def test_equal_scores_give_uniform_mean(rng):
    d = 4
    store = _identity_attention(d)
    store.replace("a.wq", np.zeros((d, d), np.float32))
    q = Tensor(rng.normal(size=(1, 1, d)))
    kv = Tensor(rng.normal(size=(1, 3, d)))
    out = B.multi_head_attention(q, kv, kv, np.ones((1, 3), bool), store, 2, "a").data
    np.testing.assert_allclose(out[0, 0], kv.data[0].mean(axis=0), rtol=1e-5, atol=1e-6)


def test_all_keys_masked_is_contract_error(rng):
    store = _identity_attention(4)
    x = Tensor(rng.normal(size=(1, 2, 4)))
    with pytest.raises(ContractError):
        B.multi_head_attention(x, x, x, np.zeros((1, 2), bool), store, 2, "a")


@given(st.integers(0, 10_000))
def test_masked_key_content_is_ignored(seed):
    rng = np.random.default_rng(seed)
    store, init = fresh(seed)
    B.init_attention(init, 8, "a")
    q = Tensor(rng.normal(size=(2, 3, 8)))
    kv = rng.normal(size=(2, 4, 8))
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    base = B.multi_head_attention(q, Tensor(kv), Tensor(kv), mask, store, 2, "a").data
    kv2 = kv.copy()
    kv2[~mask] = rng.normal(size=kv2[~mask].shape) * 100
    again = B.multi_head_attention(q, Tensor(kv2), Tensor(kv2), mask, store, 2, "a").data
    assert base.tobytes() == again.tobytes()


def _encoder(seed=0):
    store, init = fresh(seed)
    B.init_encoder_layer(init, CFG, "enc")
    return store


@given(st.integers(0, 10_000))
def test_encoder_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    store = _encoder(seed)
    with precision("float64"):
        store = store.astype(np.float64)
        x = rng.normal(size=(1, 5, CFG.d_model))
        mask = np.array([[True, True, True, False, True]])
        perm = rng.permutation(5)
        out = B.encoder_layer(Tensor(x), mask, store, CFG, "enc", eval_ctx()).data
        out_p = B.encoder_layer(Tensor(x[:, perm]), mask[:, perm], store, CFG, "enc", eval_ctx()).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-10, atol=1e-12)


@given(st.integers(0, 10_000))
def test_encoder_masked_positions_do_not_leak(seed):
    rng = np.random.default_rng(seed)
    store = _encoder(seed)
    x = rng.normal(size=(2, 5, CFG.d_model))
    mask = np.array([[True, True, False, False, False], [True, True, True, True, False]])
    out = B.encoder_layer(Tensor(x), mask, store, CFG, "enc", eval_ctx()).data
    x2 = x.copy()
    x2[~mask] = rng.normal(size=x2[~mask].shape) * 50
    out2 = B.encoder_layer(Tensor(x2), mask, store, CFG, "enc", eval_ctx()).data
    assert out.shape == x.shape
    assert out[mask].tobytes() == out2[mask].tobytes()


def test_precomputed_grid_is_passthrough(rng):
    cfg = CFG.with_(backbone="precomputed")
    grid = Tensor(rng.normal(size=(2, cfg.grid_size ** 2, cfg.d_model)))
    out = B.image_grid_features(grid, ParamStore(), cfg, eval_ctx())
    assert out.data.tobytes() == grid.data.tobytes()
    with pytest.raises(ConfigurationError):
        B.image_grid_features(Tensor(np.zeros((2, 3, cfg.d_model))), ParamStore(), cfg, eval_ctx())


def test_tiny_conv_shapes_and_constant_image(rng):
    store, init = fresh()
    B.init_image_extractor(init, CFG)
    images = rng.normal(size=(3, 3, CFG.image_size, CFG.image_size))
    out = B.image_grid_features(images, store, CFG, eval_ctx()).data
    assert out.shape == (3, CFG.grid_size ** 2, CFG.d_model)
    # constant image: zero padding breaks spatial symmetry unless the value is 0
    const = B.image_grid_features(np.zeros((1, 3, 16, 16)), store, CFG, eval_ctx()).data
    np.testing.assert_array_equal(const[0], np.broadcast_to(const[0, :1], const[0].shape))


def test_constant_image_with_1x1_backbone_gives_equal_cells():
    cfg = CFG.with_(conv_channels=(4,), grid_size=4)
    store, init = fresh(3)
    B.init_image_extractor(init, cfg)
    # centre cells never see the padding; check them for a nonzero constant
    img = np.full((1, 3, 8, 8), 0.7)
    out = B.image_grid_features(img, store, cfg, eval_ctx()).data[0].reshape(4, 4, -1)
    inner = out[1:3, 1:3].reshape(4, -1)
    np.testing.assert_allclose(inner, np.broadcast_to(inner[:1], inner.shape), rtol=1e-6)


def test_tiny_conv_rejects_wrong_size():
    store, init = fresh()
    B.init_image_extractor(init, CFG)
    with pytest.raises(ConfigurationError):
        B.image_grid_features(np.zeros((1, 3, 40, 40)), store, CFG, eval_ctx())


def test_batch_norm_buffers_update_only_in_training(rng):
    store, init = fresh()
    B.init_image_extractor(init, CFG)
    images = rng.normal(size=(4, 3, 16, 16))
    ctx = eval_ctx()
    B.image_grid_features(images, store, CFG, ctx)
    assert ctx.buffer_updates == {}
    ctx = B.ForwardContext("train", np.random.default_rng(0))
    B.image_grid_features(images, store, CFG, ctx)
    assert set(ctx.buffer_updates) == {"image_extractor.bn.running_mean", "image_extractor.bn.running_var"}
    assert not store["image_extractor.bn.running_mean"].requires_grad


def test_gate_zero_params_give_half():
    store, init = fresh()
    B.init_gating_head(init, CFG)
    for name in list(store):
        store.replace(name, np.zeros_like(store[name].data))
    feats = Tensor(np.random.default_rng(0).normal(size=(2, 16, 2 * CFG.d_model)))
    alpha = B.gating_head(feats, np.ones((2, 16), bool), store, CFG, eval_ctx()).data
    assert alpha.shape == (2, 16)
    assert (alpha == 0.5).all()


@given(st.integers(0, 10_000))
def test_gate_values_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    store, init = fresh(seed)
    B.init_gating_head(init, CFG)
    feats = Tensor(rng.normal(size=(2, 4, 2 * CFG.d_model)))
    alpha = B.gating_head(feats, np.ones((2, 4), bool), store, CFG, eval_ctx()).data
    assert ((alpha > 0) & (alpha < 1)).all()


def test_gate_parameter_count_matches_stack():
    cfg = ModelConfig(d_model=12, heads=3, d_ff=20)
    store, init = fresh()
    B.init_gating_head(init, cfg)
    d, f = cfg.d_model, cfg.d_ff
    assert store.num_parameters() == 2 * d * f + f + f + 1


def test_gate_rejects_wrong_width():
    store, init = fresh()
    B.init_gating_head(init, CFG)
    with pytest.raises(DimensionError):
        B.gating_head(Tensor(np.zeros((1, 2, CFG.d_model))), np.ones((1, 2), bool), store, CFG, eval_ctx())


def test_scoring_head_zeroes_padding(rng):
    store, init = fresh()
    B.init_scoring_head(init, CFG, "h")
    mask = np.array([[True, False, True]])
    s = B.scoring_head(Tensor(rng.normal(size=(1, 3, CFG.d_model))), mask, store, "h").data
    assert s[0, 1] == 0 and (s[mask] > 0).all() and (s[mask] < 1).all()


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ConfigurationError):
        ModelConfig(max_tags=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(backbone="resnet50")
