import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointquery import geometry
from pointquery.matcher import assignment_cost, cost_matrix, hungarian, match_cost

from oracles import brute_force_assignment_cost, random_box


def test_match_cost_examples():
    b = (0.1, 0.2, 0.4, 0.6)
    assert match_cost(1.0, b, b) == pytest.approx(-1.0)
    assert match_cost(0.0, b, b) == pytest.approx(0.0)


def test_match_cost_is_sum_of_terms():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, t = random_box(rng), random_box(rng)
        prob = float(rng.random())
        l1 = sum(abs(a - b) for a, b in zip(p, t))
        expected = -prob + 5 * l1 + 2 * (1 - geometry.giou(p, t))
        assert match_cost(prob, p, t) == pytest.approx(expected, abs=1e-12)


def test_cost_matrix_agrees_with_match_cost():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(5), size=6)
    preds = np.array([random_box(rng) for _ in range(6)])
    tcls = np.array([0, 3, 2])
    tbox = np.array([random_box(rng) for _ in range(3)])
    c = cost_matrix(probs, preds, tcls, tbox)
    assert c.shape == (3, 6)
    for i in range(3):
        for j in range(6):
            assert c[i, j] == pytest.approx(match_cost(probs[j, tcls[i]], preds[j], tbox[i]), abs=1e-12)


def test_identity_friendly():
    c = np.ones((4, 4)) - np.eye(4)
    cols = hungarian(c)
    assert cols.tolist() == [0, 1, 2, 3]
    assert assignment_cost(c, cols) == 0.0


def test_single_row_is_argmin():
    c = np.array([[3.0, 1.0, 2.0, 1.0]])
    assert hungarian(c).tolist() == [1]


def test_ties_prefer_lowest_index():
    assert hungarian(np.zeros((2, 4))).tolist() == [0, 1]


def test_empty_and_errors():
    assert hungarian(np.zeros((0, 3))).shape == (0,)
    with pytest.raises(ValueError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.inf]]))
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.nan]]))


def test_brute_force_small():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n, 7))
        c = rng.normal(size=(n, m))
        cols = hungarian(c)
        assert len(set(cols.tolist())) == n
        assert assignment_cost(c, cols) == pytest.approx(brute_force_assignment_cost(c), abs=1e-9)


@settings(deadline=None, max_examples=50)
@given(st.integers(1, 5), st.integers(0, 2), st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_constant_shift_keeps_optimum(n, extra, seed, shift):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 4, size=(n, n + extra)).astype(float)
    a = hungarian(c)
    b = hungarian(c + shift)
    # b must also be optimal for the unshifted matrix
    assert assignment_cost(c, b) == pytest.approx(assignment_cost(c, a), abs=1e-9)


def test_deterministic():
    c = np.random.default_rng(0).integers(0, 3, size=(6, 9)).astype(float)
    assert hungarian(c).tolist() == hungarian(c.copy()).tolist()


def test_200x200_speed():
    c = np.random.default_rng(0).random((200, 200))
    hungarian(c)
    best = min(_timed(hungarian, c) for _ in range(3))
    assert best < 0.1


def _timed(fn, *args):
    t = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t
