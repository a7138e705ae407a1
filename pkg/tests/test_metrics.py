import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magneto.errors import ContractError, DimensionError
from magneto.metrics import METRIC_COLUMNS, binarize, outlier_pick_rate, prf1, write_metrics_csv


def test_binarize_threshold_is_inclusive():
    pred = binarize([[0.5, 0.49999, 0.9]], 0.5, [[True, True, False]])
    assert pred.tolist() == [[1, 0, 0]]
    with pytest.raises(ContractError):
        binarize([[0.2]], 1.0)


def test_micro_scores_example():
    pred = np.array([[1, 1, 0, 0], [1, 0, 0, 0]])
    truth = np.array([[1, 0, 1, 0], [1, 0, 0, 0]])
    mask = np.array([[True, True, True, False], [True, True, False, False]])
    m = prf1(pred, truth, mask)
    assert m.precision == pytest.approx(2 / 3)
    assert m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.macro_precision == pytest.approx((0.5 + 1) / 2)
    assert m.macro_f1 == pytest.approx((0.5 + 1) / 2)


def test_item_with_nothing_to_find_counts_as_perfect():
    m = prf1(np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2), bool))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert (m.macro_precision, m.macro_recall, m.macro_f1) == (1.0, 1.0, 1.0)


def test_shape_and_empty_errors():
    with pytest.raises(DimensionError):
        prf1(np.zeros((1, 2)), np.zeros((1, 3)), np.ones((1, 2), bool))
    with pytest.raises(ContractError):
        prf1(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2), bool))


def test_outlier_rate():
    pred = np.array([[1, 1, 0], [1, 0, 0]])
    flags = np.array([[False, True, False], [False, False, True]])
    assert outlier_pick_rate(pred, flags, np.ones((2, 3), bool)) == 50.0
    with pytest.raises(ContractError):
        outlier_pick_rate(pred, np.zeros((2, 3), bool), np.ones((2, 3), bool))


@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_raising_threshold_never_raises_recall(seed, t):
    rng = np.random.default_rng(seed)
    scores = rng.random((5, 6))
    truth = rng.integers(0, 2, (5, 6))
    mask = rng.random((5, 6)) < 0.8
    mask[:, 0] = True
    lo = prf1(binarize(scores, t, mask), truth, mask)
    hi = prf1(binarize(scores, min(t + 0.05, 0.99), mask), truth, mask)
    assert hi.recall <= lo.recall


@given(st.integers(0, 10_000))
def test_item_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.integers(0, 2, (6, 4)), rng.integers(0, 2, (6, 4))
    mask = np.ones((6, 4), bool)
    perm = rng.permutation(6)
    a, b = prf1(pred, truth, mask), prf1(pred[perm], truth[perm], mask)
    assert a.f1 == b.f1
    assert a.macro_f1 == pytest.approx(b.macro_f1, abs=1e-12)


def test_metrics_csv(tmp_path):
    m = prf1(np.array([[1, 0]]), np.array([[1, 1]]), np.ones((1, 2), bool))
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [("run", "val", m)])
    rows = list(csv.reader(open(path)))
    assert rows[0] == METRIC_COLUMNS
    assert rows[1][:2] == ["run", "val"] and rows[1][-1] == ""
    assert float(rows[1][4]) == pytest.approx(2 / 3)
