import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import all_binary_matrices, brute_metrics
from wxnet.metrics import evaluate, macro_scores, overall_scores, per_class_pr


def test_perfect_prediction():
    truth = np.array([[1, 0, 0], [1, 1, 0]])
    p, r = per_class_pr(truth, truth)
    assert p.tolist() == [1.0, 1.0, 0.0] and r.tolist() == [1.0, 1.0, 0.0]
    assert overall_scores(truth, truth) == (1.0, 1.0, 1.0)


def test_half_half():
    p, r = per_class_pr([[1], [1], [0], [0]], [[1], [0], [1], [0]])
    assert (p[0], r[0]) == (0.5, 0.5)


def test_all_zero_prediction():
    p, r = per_class_pr([[1, 0], [0, 1]], [[0, 0], [0, 0]])
    assert p.tolist() == [0.0, 0.0] and r.tolist() == [0.0, 0.0]


def test_macro():
    assert macro_scores([1, 0], [1, 0]) == (0.5, 0.5, 0.5)
    assert macro_scores([1, 1], [1, 1]) == (1.0, 1.0, 1.0)


@pytest.mark.parametrize("ap,ar,af1", [(0.8022, 0.7369, 0.7682), (0.7783, 0.6815, 0.7267), (0.7913, 0.7596, 0.7751)])
def test_macro_published_rows(ap, ar, af1):
    assert macro_scores([ap], [ar])[2] == pytest.approx(af1, abs=5e-4)


def test_overall_fixture():
    truth, pred = [[1, 0], [0, 1]], [[1, 1], [0, 1]]
    op, orr, of1 = overall_scores(truth, pred, "tp")
    assert op == pytest.approx(2 / 3) and orr == 1.0 and of1 == pytest.approx(0.8)
    op, orr, _ = overall_scores(truth, pred, "literal")
    assert op == 0.75 and orr == 1.5


def test_literal_undefined_or():
    with pytest.raises(ZeroDivisionError):
        overall_scores([[0, 0]], [[0, 0]], "literal")


def test_shape_mismatch():
    with pytest.raises(ValueError):
        per_class_pr([[1, 0]], [[1, 0, 1]])


def test_report_csv():
    rep = evaluate([[1, 0], [0, 1]], [[1, 1], [0, 1]], ["sunny", "cloudy"])
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "sunny,cloudy,AP,AR,AF1,OP,OR,OF1"
    assert lines[1].startswith("1.000/1.000,0.500/1.000,0.7500,1.0000")


@pytest.mark.parametrize("n,k", [(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (2, 3), (3, 2), (1, 6), (6, 1)])
def test_all_pairs_match_brute_force(n, k):
    mats = list(all_binary_matrices(n, k))
    for t in mats:
        for p in mats:
            _check_against_oracle(t, p)


@pytest.mark.parametrize("n,k", [(3, 4), (4, 3), (2, 6), (6, 2), (12, 1), (1, 12)])
def test_all_matrices_up_to_twelve_slots(n, k):
    rng = np.random.default_rng(n * 100 + k)
    for t in all_binary_matrices(n, k):
        ta = np.array(t)
        for p in (np.roll(ta, 1, axis=1), 1 - ta, (rng.random(ta.shape) < 0.5).astype(int)):
            _check_against_oracle(t, p.tolist())
            _check_against_oracle(p.tolist(), t)


def _check_against_oracle(t, p):
    prec, rec, macro, overall = brute_metrics(t, p, "tp")
    mp, mr = per_class_pr(t, p)
    assert mp.tolist() == prec and mr.tolist() == rec
    assert macro_scores(mp, mr) == macro
    assert overall_scores(t, p, "tp") == overall
    _, _, _, lit = brute_metrics(t, p, "literal")
    if lit[1] is None:
        with pytest.raises(ZeroDivisionError):
            overall_scores(t, p, "literal")
    else:
        assert overall_scores(t, p, "literal") == lit


binary = st.integers(1, 5).flatmap(lambda n: st.integers(1, 5).flatmap(
    lambda k: st.tuples(*(st.lists(st.lists(st.integers(0, 1), min_size=k, max_size=k), min_size=n, max_size=n),) * 2)))


@settings(max_examples=200, deadline=None)
@given(binary)
def test_symmetry(pair):
    t, p = pair
    pt, rt = per_class_pr(t, p)
    pp, rp = per_class_pr(p, t)
    assert pt.tolist() == rp.tolist() and rt.tolist() == pp.tolist()
    op, orr, _ = overall_scores(t, p)
    op2, orr2, _ = overall_scores(p, t)
    assert (op, orr) == (orr2, op2)


@settings(max_examples=200, deadline=None)
@given(binary, st.integers(0, 10**6))
def test_monotone_and_bounded(pair, pick):
    t, p = (np.array(m) for m in pair)
    wrong = np.argwhere(t != p)
    before = overall_scores(t, p) + macro_scores(*per_class_pr(t, p))
    assert all(0.0 <= v <= 1.0 for v in before)
    if len(wrong):
        i, c = wrong[pick % len(wrong)]
        p2 = p.copy()
        p2[i, c] = t[i, c]
        p_before, r_before = per_class_pr(t, p)
        p_after, r_after = per_class_pr(t, p2)
        assert np.all(p_after >= p_before) and np.all(r_after >= r_before)
        after = overall_scores(t, p2)
        assert all(a >= b for a, b in zip(after, overall_scores(t, p)))
