import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magneto.config import TadConfig
from magneto.data import TaggedItem, TagVocabulary
from magneto.errors import ConfigurationError, ContractError
from magneto.tad import (augment, augment_all, coefficient_bound, inject_irrelevant, inject_outliers,
                         tad_add, tad_drop)

VOCAB = TagVocabulary(f"t{k}" for k in range(1, 101))


def make_item(n_imp, n_unimp, seed=0):
    ids = np.random.default_rng(seed).choice(np.arange(1, 101), size=n_imp + n_unimp, replace=False)
    return TaggedItem("x", [int(i) for i in ids], [1] * n_imp + [0] * n_unimp)


def test_bound_example():
    assert coefficient_bound(0.3, 45) == 13
    assert coefficient_bound(0.29, 100) == 29
    assert coefficient_bound(0.0, 45) == 0


def test_zero_coefficients_are_identity(rng):
    item = make_item(3, 5)
    assert tad_add(item, VOCAB, 0.0, rng) is item
    assert tad_drop(item, 0.0, rng) is item
    assert augment_all([item], VOCAB, TadConfig(), rng)[0] is item


def test_drop_without_unimportant_tags_is_identity(rng):
    item = make_item(4, 0)
    assert tad_drop(item, 1.0, rng) is item


def test_add_respects_slot_budget(rng):
    item = make_item(2, 6)
    for _ in range(50):
        assert len(tad_add(item, VOCAB, 1.0, rng, max_tags=10).tags) <= 10


def test_negative_coefficient_rejected():
    with pytest.raises(ConfigurationError):
        TadConfig(beta=-0.1)


def test_thousand_seed_invariants():
    cfg = TadConfig(0.5, 0.5)
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        item = make_item(int(rng.integers(1, 5)), int(rng.integers(0, 9)), seed)
        out = augment(item, VOCAB, cfg, rng)
        n_unimp = len(item.unimportant)
        orig = dict(zip(item.tags, item.labels))
        added = [t for t in out.tags if t not in orig]
        dropped = [t for t in item.tags if t not in out.tags]
        assert len(set(out.tags)) == len(out.tags)
        assert all(orig.get(t, 0) == y for t, y in zip(out.tags, out.labels))
        assert set(item.important) <= set(out.tags)
        assert len(added) <= coefficient_bound(0.5, n_unimp)
        assert len(dropped) <= coefficient_bound(0.5, n_unimp)
        assert not set(dropped) & set(added)


@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_inject_outliers(seed, count):
    rng = np.random.default_rng(seed)
    items = [make_item(2, 2, s) for s in range(4)]
    out, flags = inject_outliers(items, count, VOCAB, rng, max_tags=7)
    for src, dst, f in zip(items, out, flags):
        n = min(count, 7 - len(src.tags))
        assert dst.tags[: len(src.tags)] == src.tags
        assert f == [False] * len(src.tags) + [True] * n
        assert dst.labels[len(src.tags):] == [0] * n
        assert len(set(dst.tags)) == len(dst.tags)


def test_inject_outliers_rejects_negative(rng):
    with pytest.raises(ContractError):
        inject_outliers([make_item(1, 1)], -1, VOCAB, rng)


def test_inject_irrelevant_relabels(rng):
    items = [make_item(2, 2, s) for s in range(20)]
    for src, dst in zip(items, inject_irrelevant(items, VOCAB, 0.5, rng)):
        n = len(src.tags)
        assert dst.tags[:n] == src.tags
        assert dst.labels[:n] == [1] * n
        assert 1 <= len(dst.tags) - n <= 2
        assert dst.labels[n:] == [0] * (len(dst.tags) - n)


def test_small_vocabulary_caps_additions(rng):
    vocab = TagVocabulary(["a", "b", "c"])
    item = TaggedItem("x", [1, 2], [1, 0])
    out, flags = inject_outliers([item], 5, vocab, rng)
    assert out[0].tags == [1, 2, 3] and flags[0] == [False, False, True]
