import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_cooccurrence
from wxnet.cooccurrence import analyze, cooccurrence_matrix, dataset_stats, label_order

GRID = (0.0, 0.49, 0.5, 1.0)
THREE = [[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]


def test_three_sample_fixture():
    R = cooccurrence_matrix(THREE)
    assert R.tolist() == [[1.0, 0.5], [0.5, 1.0]]


def test_single_class():
    assert cooccurrence_matrix([[0.9], [1.0]]).tolist() == [[1.0]]


def test_sub_threshold():
    assert not cooccurrence_matrix(np.full((3, 2), 0.49)).any()


def test_needs_samples():
    with pytest.raises(ValueError):
        cooccurrence_matrix(np.zeros((0, 2)))


def test_out_of_range():
    with pytest.raises(ValueError):
        cooccurrence_matrix([[1.2, 0.0]])


def test_symmetric_order():
    r, order = label_order([[1.0, 0.3], [0.3, 1.0]])
    assert r.tolist() == [1.0, 1.0] and order.tolist() == [0, 1]


def test_two_class_ratio():
    r, order = label_order([[1.0, 0.8], [0.2, 1.0]])
    assert r[0] == pytest.approx(1.5) and r[1] == pytest.approx(1.2 / 1.8)
    assert order.tolist() == [0, 1]


def test_never_occurring_ranks_last():
    r, order = label_order(cooccurrence_matrix([[1.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))
    assert r[1] == 0.0 and order[-1] == 1


def test_influential_class_first():
    # X (column 0) only ever appears together with the others, which also appear without it
    rows = [[1, 1, 1, 1]] * 3 + [[0, 1, 0, 0]] * 6 + [[0, 0, 1, 0]] * 6 + [[0, 0, 0, 1]] * 6 + [[0, 1, 1, 0]] * 4
    r, order = label_order(cooccurrence_matrix(rows))
    assert order[0] == 0 and r[0] == r.max()


def test_stats():
    st_ = dataset_stats(THREE, ["A", "B"])
    assert st_.as_row() == {"A": 2, "B": 2, ">1 label": 1, "Total": 3}
    assert dataset_stats(np.zeros((4, 1))).counts.tolist() == [0]


def test_report_writes(tmp_path):
    rep = analyze(THREE, ["A", "B"])
    rep.write(tmp_path)
    assert (tmp_path / "cooccurrence.csv").read_text().splitlines()[1] == "A,1.000000,0.500000"
    assert "A -> B" in rep.summary()


def _compare(table):
    R, r, order = brute_cooccurrence(table)
    rep = analyze(np.array(table))
    assert rep.R.tolist() == R
    assert rep.r.tolist() == r
    assert rep.order.tolist() == order


@pytest.mark.parametrize("n,k", [(n, k) for n in range(1, 5) for k in range(1, 4) if n * k <= 6])
def test_full_value_grid(n, k):
    for vals in itertools.product(GRID, repeat=n * k):
        _compare([list(vals[i * k:(i + 1) * k]) for i in range(n)])


@pytest.mark.parametrize("n,k", [(3, 3), (4, 3)])
def test_all_presence_patterns(n, k):
    rng = np.random.default_rng(n * k)
    for bits in itertools.product((0, 1), repeat=n * k):
        table = [[(0.5 if rng.random() < 0.5 else 1.0) if bits[i * k + j] else (0.0 if rng.random() < 0.5 else 0.49)
                  for j in range(k)] for i in range(n)]
        _compare(table)


strength_tables = st.integers(1, 6).flatmap(lambda n: st.integers(1, 4).flatmap(
    lambda k: st.lists(st.lists(st.sampled_from(GRID + (0.2, 0.8)), min_size=k, max_size=k), min_size=n, max_size=n)))


@settings(max_examples=150, deadline=None)
@given(strength_tables)
def test_bounds_and_diagonal(table):
    R = cooccurrence_matrix(table)
    assert np.all((R >= 0) & (R <= 1))
    occurs = (np.array(table) >= 0.5).any(axis=0)
    assert np.all(np.diag(R)[occurs] == 1.0)


@settings(max_examples=150, deadline=None)
@given(strength_tables)
def test_duplication_invariance(table):
    a, b = analyze(table), analyze(table + table)
    np.testing.assert_array_equal(a.R, b.R)
    np.testing.assert_array_equal(a.r, b.r)
    np.testing.assert_array_equal(a.order, b.order)


@settings(max_examples=150, deadline=None)
@given(strength_tables, st.integers(0, 3))
def test_single_label_sample_dilutes_row(table, which):
    k = len(table[0])
    i = which % k
    extra = [0.0] * k
    extra[i] = 1.0
    before, after = cooccurrence_matrix(table), cooccurrence_matrix(table + [extra])
    others = [j for j in range(k) if j != i]
    assert np.all(after[i, others] <= before[i, others] + 1e-15)
    # rows of the other classes keep their denominators, hence their values
    np.testing.assert_array_equal(after[others], before[others])
