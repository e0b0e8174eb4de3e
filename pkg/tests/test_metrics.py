from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chamfer_loops, exact_ot
from toolalign.geometry import random_transform
from toolalign.metrics import (
    BRUTE_FORCE_MAX,
    NeighborIndex,
    SinkhornConfig,
    chamfer,
    chamfer_brute,
    entropic_ot,
    nearest,
    nearest_brute,
    normalized_score,
    sinkhorn_divergence,
)

seeds = st.integers(0, 2**32 - 1)


def test_chamfer_single_points():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer([[0, 0, 0]], [[0, 2, 0]]) == 8.0


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), [[0, 0, 0]])


@given(seeds, st.integers(1, 40), st.integers(1, 40))
@settings(max_examples=40)
def test_chamfer_matches_loop_oracle(seed, n, m):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, 3))
    B = rng.normal(size=(m, 3))
    assert chamfer(A, B) == pytest.approx(chamfer_loops(A, B), rel=1e-12, abs=1e-15)


@given(seeds, st.integers(1, 300), st.integers(1, 300))
@settings(max_examples=40)
def test_tree_equals_brute_bitwise(seed, n, m):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, 3))
    B = rng.normal(size=(m, 3))
    assert chamfer(A, B) == chamfer_brute(A, B)


def test_tree_used_above_threshold():
    rng = np.random.default_rng(0)
    assert NeighborIndex(rng.normal(size=(BRUTE_FORCE_MAX, 3)))._tree is None
    assert NeighborIndex(rng.normal(size=(BRUTE_FORCE_MAX + 1, 3)))._tree is not None


def test_ties_go_to_lowest_index():
    dst = np.array([[1.0, 0, 0], [-1.0, 0, 0]] * 40)
    idx_b, d2_b = nearest_brute(np.zeros((1, 3)), dst)
    assert idx_b[0] == 0 and d2_b[0] == 1.0
    # the tree may return any of the tied duplicates, at the same distance
    idx, d2 = nearest(np.zeros((1, 3)), dst)
    assert d2[0] == 1.0 and np.array_equal(dst[idx[0]] ** 2, dst[0] ** 2)


@given(seeds)
@settings(max_examples=30)
def test_chamfer_properties(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(30, 3))
    B = rng.normal(size=(25, 3))
    assert chamfer(A, A) == 0.0
    assert chamfer(A, B) == chamfer(B, A)
    assert chamfer(A, B) > 0
    T = random_transform(rng)
    assert chamfer(T.apply(A), T.apply(B)) == pytest.approx(chamfer(A, B), rel=1e-9)


def test_sinkhorn_config_validation():
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon=0)
    with pytest.raises(ValueError):
        SinkhornConfig(max_iterations=0)


@given(seeds, st.integers(2, 64))
@settings(max_examples=20, deadline=None)
def test_sinkhorn_self_divergence_zero(seed, n):
    A = np.random.default_rng(seed).random((n, 3))
    assert abs(sinkhorn_divergence(A, A).value) <= 1e-9


def test_sinkhorn_self_divergence_copy_is_zero():
    A = np.random.default_rng(2).random((256, 3))
    assert abs(sinkhorn_divergence(A, A.copy()).value) <= 1e-9


@given(seeds, st.integers(2, 8))
@settings(max_examples=25, deadline=None)
def test_sinkhorn_close_to_assignment_ot(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.random((n, 3))
    B = rng.random((n, 3))
    s = sinkhorn_divergence(A, B, SinkhornConfig(epsilon=1e-3)).value
    assert s == pytest.approx(exact_ot(A, B), rel=0.02)


def test_entropic_ot_upper_bound_behaviour():
    # entropic OT >= exact OT - eps*log(n) style slack; at tiny eps it is close
    rng = np.random.default_rng(4)
    A = rng.random((6, 3))
    B = rng.random((6, 3))
    r = entropic_ot(A, B, SinkhornConfig(epsilon=1e-4, max_iterations=5000))
    assert r.value == pytest.approx(exact_ot(A, B), rel=5e-3)


def test_sinkhorn_reports_non_convergence():
    rng = np.random.default_rng(5)
    A = rng.random((30, 3))
    B = rng.random((30, 3)) + 1.0
    r = sinkhorn_divergence(A, B, SinkhornConfig(epsilon=1e-3, max_iterations=2))
    assert not r.converged and r.iterations == 2 and np.isfinite(r.value)


def test_normalized_score_exact_cases():
    assert normalized_score(4.0, 1.0) == 0.75
    assert normalized_score(2.0, 2.0) == 0.0
    assert normalized_score(2.0, 3.0) == -0.5
    assert normalized_score(1.0, 0.0) == 1.0
    assert normalized_score(Fraction(3), Fraction(1)) == Fraction(2, 3)
    with pytest.raises(ValueError):
        normalized_score(0.0, 1.0)
