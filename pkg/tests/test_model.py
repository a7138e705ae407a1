import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magneto.checks import tiny_batch
from magneto.config import TINY_MODEL
from magneto.data import Batch
from magneto.errors import ContractError, ParameterError
from magneto.model import (ModelKind, build_model, copied_names, copy_pretrained, forward,
                           forward_baseline, forward_pretrain, predict_scores)
from magneto.tensor import precision

CFG = TINY_MODEL


def test_fused_score_is_convex_combination_bitwise():
    store = build_model("MAGNETO", CFG, seed=3)
    for seed in range(20):
        out = forward(tiny_batch(CFG, seed, bs=3), store, CFG)
        a, o_it, o_t = out.alpha.data, out.o_it.data, out.o_t.data
        assert out.o_final.data.tobytes() == (a * o_it + (1 - a) * o_t).tobytes()
        lo, hi = np.minimum(o_it, o_t), np.maximum(o_it, o_t)
        assert ((out.o_final.data >= lo) & (out.o_final.data <= hi)).all()


def test_gate_limits_select_a_stream():
    store = build_model("MAGNETO", CFG, seed=0)
    batch = tiny_batch(CFG)
    for bias, stream in ((40.0, "o_it"), (-40.0, "o_t")):
        s = store.copy()
        s.replace("gate.fc2.weight", np.zeros_like(s["gate.fc2.weight"].data))
        s.replace("gate.fc2.bias", np.full_like(s["gate.fc2.bias"].data, bias))
        with precision("float64"):
            s = s.astype(np.float64)
            out = forward(batch, s, CFG)
        np.testing.assert_allclose(out.o_final.data, getattr(out, stream).data, atol=1e-15)


def test_pretrain_schema_has_no_gate_and_shares_streams():
    full = build_model("MAGNETO", CFG, seed=0)
    pre = build_model("MAGNETO_PRETRAIN", CFG, seed=0)
    assert not any(n.startswith("gate.") for n in pre)
    assert set(pre) == {n for n in full if not n.startswith("gate.")}
    batch = tiny_batch(CFG)
    o_it, o_t = forward_pretrain(batch, full, CFG)
    out = forward(batch, full, CFG)
    assert o_it.data.tobytes() == out.o_it.data.tobytes()
    assert o_t.data.tobytes() == out.o_t.data.tobytes()
    with pytest.raises(ParameterError):
        forward(batch, pre, CFG)


def test_baseline_schemas():
    ff = build_model("FF", CFG)
    assert not any("attention" in n or "image" in n for n in ff)
    tf_t = build_model("TF_T", CFG)
    tf_it = build_model("TF_IT", CFG)
    assert tf_t.num_parameters() < tf_it.num_parameters()
    batch = tiny_batch(CFG)
    for kind in ("FF", "TF_T", "TF_IT"):
        out = forward_baseline(kind, batch, build_model(kind, CFG), CFG).data
        assert out.shape == batch.tag_ids.shape
        assert (out[~batch.mask] == 0).all()
    with pytest.raises(ContractError):
        forward_baseline("MAGNETO", batch, ff, CFG)
    with pytest.raises(ContractError):
        ModelKind.parse("resnet")


def test_build_is_deterministic():
    a, b = build_model("MAGNETO", CFG, seed=5), build_model("MAGNETO", CFG, seed=5)
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = build_model("MAGNETO", CFG, seed=6)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_copy_pretrained():
    pre = build_model("MAGNETO_PRETRAIN", CFG, seed=1)
    dst = build_model("MAGNETO", CFG, seed=2)
    out = copy_pretrained(pre, dst)
    names = copied_names(out)
    assert names and not any(n.startswith(("gate.", "image_head", "tag_head")) for n in names)
    for n in out:
        src = pre if n in names else dst
        assert out[n].data.tobytes() == src[n].data.tobytes()
    # untouched destination
    assert dst["tag_embedder.weight"].data.tobytes() != out["tag_embedder.weight"].data.tobytes()
    with pytest.raises(ParameterError):
        copy_pretrained(build_model("MAGNETO_PRETRAIN", CFG.with_(d_model=4)), dst)


def test_pretrain_scores_are_stream_mean():
    store = build_model("MAGNETO_PRETRAIN", CFG)
    batch = tiny_batch(CFG)
    s, streams = predict_scores("MAGNETO_PRETRAIN", batch, store, CFG)
    o_it, o_t = forward_pretrain(batch, store, CFG)
    assert streams is None
    np.testing.assert_array_equal(s.data, (o_it.data + o_t.data) * 0.5)


def test_empty_item_is_rejected():
    batch = tiny_batch(CFG)
    batch.tag_ids[1] = 0
    batch.mask = batch.tag_ids != 0
    with pytest.raises(ContractError):
        forward(batch, build_model("MAGNETO", CFG), CFG)


def _permuted(batch: Batch, perm):
    return Batch(batch.tag_ids[:, perm], batch.labels[:, perm], batch.mask[:, perm],
                 batch.images, batch.features)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_tag_order_permutes_outputs(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        store = build_model("MAGNETO", CFG, seed=seed)
        batch = tiny_batch(CFG, seed)
        perm = rng.permutation(CFG.max_tags)
        base = forward(batch, store, CFG).arrays()
        moved = forward(_permuted(batch, perm), store, CFG).arrays()
    for k in base:
        np.testing.assert_allclose(moved[k], base[k][:, perm], rtol=1e-12, atol=1e-14)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_padding_contents_never_reach_valid_outputs(seed):
    rng = np.random.default_rng(seed)
    store = build_model("MAGNETO", CFG, seed=seed)
    batch = tiny_batch(CFG, seed, bs=3)
    base = forward(batch, store, CFG).arrays()
    # a padded slot holds id 0 by definition; corrupt the label under it instead
    labels = batch.labels.copy()
    labels[~batch.mask] = rng.integers(0, 2, size=(~batch.mask).sum())
    again = forward(Batch(batch.tag_ids, labels, batch.mask, batch.images), store, CFG).arrays()
    for k in base:
        assert base[k][batch.mask].tobytes() == again[k][batch.mask].tobytes()
