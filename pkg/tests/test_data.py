from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magneto.config import SyntheticConfig
from magneto.data import (NUS_WIDE_CONCEPTS, TaggedItem, TagOverflowError, TagVocabulary, augment_images,
                          generate_synthetic, load_items, occupancy, pad_and_batch, preprocess_nuswide,
                          read_raw_records, save_items, split_items, tag_patterns)
from magneto.errors import ContractError, DataFormatError, GenerationError, VocabularyError

FIXTURE = resources.files("magneto") / "fixtures" / "nuswide_sample.jsonl"


def test_vocabulary_round_trip(tmp_path):
    v = TagVocabulary(["sky", "sea", "sky"])
    assert len(v) == 2 and v.size == 3 and v.id("sea") == 2 and v.tag(1) == "sky"
    v.save(tmp_path / "v.txt")
    w = TagVocabulary.load(tmp_path / "v.txt")
    assert w.tags() == v.tags()
    with pytest.raises(VocabularyError):
        v.id("moon")
    with pytest.raises(VocabularyError):
        v.tag(0)


def test_vocabulary_file_errors(tmp_path):
    (tmp_path / "dup.txt").write_text("a\nb\na\n")
    with pytest.raises(DataFormatError, match="line 3"):
        TagVocabulary.load(tmp_path / "dup.txt")
    (tmp_path / "gap.txt").write_text("a\n\nb\n")
    with pytest.raises(DataFormatError, match="line 2"):
        TagVocabulary.load(tmp_path / "gap.txt")


def test_concept_list_size():
    assert len(NUS_WIDE_CONCEPTS) == 81 == len(set(NUS_WIDE_CONCEPTS))


def test_fixture_survivors():
    items, vocab, rejections = preprocess_nuswide(read_raw_records(FIXTURE))
    assert [it.id for it in items] == ["0001", "0004"]
    assert [vocab.tag(t) for t in items[0].tags] == ["sky"] and items[0].labels == [1]
    assert [vocab.tag(t) for t in items[1].tags] == ["beach", "water", "sunset"]
    assert items[1].labels == [1, 1, 0]
    assert [(r.item_id, r.reason) for r in rejections] == [("0005", "missing field 'tags'")]


def test_undecodable_record_is_rejected(tmp_path):
    p = tmp_path / "raw.jsonl"
    p.write_text('{"id": "1", "tags": ["sky"], "concepts": ["sky"]}\nnot json\n')
    items, _, rejections = preprocess_nuswide(read_raw_records(p))
    assert len(items) == 1 and "line 2" in rejections[0].reason


def items_of(lengths):
    return [TaggedItem(str(i), list(range(1, n + 1)), [1] + [0] * (n - 1)) for i, n in enumerate(lengths)]


def test_padding_layout():
    batches = pad_and_batch(items_of([1, 3, 2]), 4, 2)
    assert [b.size for b in batches] == [2, 1]
    assert batches[0].tag_ids.tolist() == [[1, 0, 0, 0], [1, 2, 3, 0]]
    assert batches[0].mask.tolist() == [[True, False, False, False], [True, True, True, False]]
    assert batches[1].labels.tolist() == [[1, 0, 0, 0]]


def test_strict_overflow():
    with pytest.raises(TagOverflowError):
        pad_and_batch(items_of([5]), 4, 1)


@given(st.lists(st.integers(1, 9), min_size=1, max_size=6), st.integers(1, 6))
def test_lenient_truncation_keeps_important_tags(lengths, l):
    items = items_of(lengths)
    for b in pad_and_batch(items, l, 3, strict=False):
        assert b.tag_ids.shape[1] == l
        assert (b.labels[:, 0] == 1).all()
        assert (b.mask.sum(axis=1) == np.minimum([len(items[int(i)].tags) for i in b.item_ids], l)).all()


SMALL = SyntheticConfig(items=60, seed=4)


def test_synthetic_labels_follow_occupancy():
    items, vocab = generate_synthetic(SMALL)
    patterns = tag_patterns(SMALL)
    assert len(vocab) == SMALL.vocab_size
    for it in items:
        occ = occupancy(it.image, patterns, SMALL.grid_size)
        for t, y in zip(it.tags, it.labels):
            assert y == int(occ.get(t, 0) >= SMALL.threshold)
        assert any(occ.get(t, 0) == 0 for t in it.tags)


def test_synthetic_is_deterministic_and_seeded():
    a, _ = generate_synthetic(SMALL)
    b, _ = generate_synthetic(SMALL)
    c, _ = generate_synthetic(SMALL.with_(seed=5))
    assert all(x.tags == y.tags and x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert any(x.tags != y.tags for x, y in zip(a, c))


def test_synthetic_features():
    items, _ = generate_synthetic(SMALL.with_(feature_dim=6, items=3))
    assert items[0].features.shape == (SMALL.grid_size ** 2, 6)


def test_synthetic_vocab_too_small():
    with pytest.raises(GenerationError):
        generate_synthetic(SyntheticConfig(vocab_size=3, patterns_max=2, distractors_max=3))


def test_items_round_trip(tmp_path):
    items, vocab = generate_synthetic(SMALL.with_(items=5))
    save_items(items, tmp_path / "d.jsonl", vocab)
    back = load_items(tmp_path / "d.jsonl", vocab)
    for a, b in zip(items, back):
        assert (a.id, a.tags, a.labels) == (b.id, b.tags, b.labels)
        assert np.array_equal(a.image, b.pixels())


def test_load_reports_line_and_field(tmp_path):
    vocab = TagVocabulary(["a", "b"])
    p = tmp_path / "d.jsonl"
    p.write_text('{"id":"1","tags":["a"],"labels":[1],"features":[[0.0]]}\n{"id":"2","tags":["b"],"features":[[0.0]]}\n')
    with pytest.raises(DataFormatError, match="line 2, field 'labels'") as exc:
        load_items(p, vocab)
    assert exc.value.line == 2
    assert load_items(p, vocab, require_labels=False)[1].labels == [1]
    (tmp_path / "empty.jsonl").write_text("")
    assert load_items(tmp_path / "empty.jsonl", vocab) == []


def test_split_is_deterministic_and_disjoint():
    items = items_of([1] * 20)
    a_tr, a_ho = split_items(items, 0.25, 3)
    b_tr, b_ho = split_items(items, 0.25, 3)
    assert [i.id for i in a_ho] == [i.id for i in b_ho] and len(a_ho) == 5
    assert not {i.id for i in a_tr} & {i.id for i in a_ho}


def test_augment_images(rng):
    imgs = rng.normal(size=(4, 3, 16, 16))
    out = augment_images(imgs, np.random.default_rng(0))
    assert out.shape == imgs.shape
    assert np.array_equal(out, augment_images(imgs, np.random.default_rng(0)))
    same = augment_images(imgs, np.random.default_rng(0), flip_p=0.0, pad_fraction=0.0)
    assert np.array_equal(same, imgs)
    with pytest.raises(ContractError):
        augment_images(imgs[0], rng)
