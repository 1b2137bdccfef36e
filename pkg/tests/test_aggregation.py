import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from attnvlad import aggregation as ag
from attnvlad.checks import CASES, run_case
from attnvlad.codebook import Codebook, init_decoupled
from attnvlad.errors import ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def cb1d(b, alpha):
    return init_decoupled(np.array(b, float)[:, None], alpha)


@pytest.mark.parametrize("mode", ["direct", "decoupled"])
def test_equidistant_point_splits_evenly(mode):
    a = ag.soft_assign(np.array([[0.5]]), cb1d([0, 1], 1.0), mode)
    np.testing.assert_allclose(a, [[0.5, 0.5]], atol=1e-15)


@pytest.mark.parametrize("mode", ["direct", "decoupled"])
def test_sharp_assignment_at_alpha_100(mode):
    a = ag.soft_assign(np.array([[0.0]]), cb1d([0, 1], 100.0), mode)
    np.testing.assert_allclose(a, [[1.0, 0.0]], atol=1e-10)
    assert a[0, 1] == pytest.approx(np.exp(-100), rel=1e-9)


def test_soft_assign_dimension_mismatch():
    with pytest.raises(ShapeError):
        ag.soft_assign(np.zeros((2, 2, 3)), cb1d([0, 1], 1.0))


def test_far_input_does_not_overflow():
    a = ag.soft_assign(np.array([[1e3]]), cb1d([0, 1], 100.0), "direct")
    assert np.all(np.isfinite(a)) and a[0, 1] == 1.0


def test_zero_residual():
    cb = cb1d([2.0, 5.0], 1.0)
    raw = ag.vlad_aggregate(np.array([[2.0]]), np.array([[1.0, 0.0]]), cb)
    assert raw[0, 0] == 0


def test_uniform_weights_scale_by_one_over_n():
    r = np.random.default_rng(0)
    X = r.standard_normal((3, 4, 2))
    cb = init_decoupled(r.standard_normal((3, 2)), 1.0)
    a = ag.soft_assign(X, cb)
    plain = ag.vlad_aggregate(X, a, cb)
    weighted = ag.vlad_aggregate(X, a, cb, np.full(12, 1 / 12))
    np.testing.assert_allclose(weighted, plain / 12, rtol=1e-14, atol=1e-15)


def test_weighted_vlad_arithmetic():
    cb = Codebook(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), 1.0)
    raw = ag.vlad_aggregate(np.array([[1.0], [2.0]]), np.ones((2, 1)), cb, np.array([0.75, 0.25]))
    assert raw[0, 0] == pytest.approx(1.25, abs=1e-15)


@pytest.mark.parametrize("w", [np.array([0.5]), np.array([0.6, 0.6]), np.array([1.5, -0.5])])
def test_bad_weights_rejected(w):
    cb = Codebook(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), 1.0)
    with pytest.raises(ValueError):
        ag.vlad_aggregate(np.array([[1.0], [2.0]]), np.ones((2, 1)), cb, w)


def test_normalize_single_row():
    pv = ag.normalize_vlad(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(pv.v, [0.6, 0.8, 0, 0], atol=1e-15)
    assert pv.normalized and pv.kind == "vlad"


def test_normalize_all_zero():
    pv = ag.normalize_vlad(np.zeros((3, 2)))
    assert pv.normalized and np.all(pv.v == 0)


def test_negligible_block_zero_at_any_scale():
    # a block ~2e-13 of the total must not flip between kept and dropped when rescaled
    raw = np.array([[9.3, 0.0], [2e-12, 0.0]])
    for scale in (1.0, 0.1, 1e3):
        np.testing.assert_array_equal(ag.normalize_vlad(scale * raw).v, [1.0, 0.0, 0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), log_scale=st.floats(-6, 6), tiny=st.floats(-16, 0))
def test_normalize_ignores_positive_scale(seed, log_scale, tiny):
    r = np.random.default_rng(seed)
    raw = r.standard_normal((4, 3))
    raw[1] *= 10.0**tiny
    np.testing.assert_allclose(ag.normalize_vlad(10.0**log_scale * raw).v, ag.normalize_vlad(raw).v, atol=1e-9)


def test_normalize_identical_rows():
    pv = ag.normalize_vlad(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.linalg.norm(pv.v) == pytest.approx(1, abs=1e-12)
    np.testing.assert_array_equal(pv.v[:2], pv.v[2:])


def test_bow_mass():
    r = np.random.default_rng(1)
    a = ag.soft_assign(r.standard_normal((5, 2)), init_decoupled(r.standard_normal((4, 2)), 1.0))
    assert ag.bow_histogram(a).sum() == pytest.approx(5, abs=1e-12)
    w = r.dirichlet(np.ones(5))
    assert ag.bow_histogram(a, w).sum() == pytest.approx(1, abs=1e-12)


def test_bow_weighted_arithmetic():
    h = ag.bow_histogram(np.eye(2), np.array([0.9, 0.1]))
    np.testing.assert_allclose(h, [0.9, 0.1], atol=1e-15)
    pv = ag.bow_aggregate(np.eye(2), np.array([0.9, 0.1]))
    assert np.linalg.norm(pv.v) == pytest.approx(1) and np.all(pv.v >= 0)


def test_gap_examples():
    X = np.broadcast_to([1.0, -2.0], (3, 3, 2))
    np.testing.assert_allclose(ag.gap_aggregate(X).v, [1, -2])
    np.testing.assert_allclose(ag.gap_aggregate(X, np.full(9, 1 / 9)).v, [1, -2])
    assert ag.gap_aggregate(np.array([[2.0], [6.0]]), np.array([0.25, 0.75])).v[0] == 5


def test_gap_uniform_weights_exact():
    X = np.random.default_rng(2).standard_normal((4, 4, 3))
    np.testing.assert_allclose(ag.gap_aggregate(X, np.full(16, 1 / 16)).v, ag.gap_aggregate(X).v, rtol=1e-14)


def test_geometric_construction():
    X1, X2, cb, w1, w2 = ag.opposite_distractor_pair()
    plain = ag.residual_cosines(X1, X2, cb)
    oracle = ag.residual_cosines(X1, X2, cb, w1, w2)
    assert plain[0] < 0
    assert oracle[0] == pytest.approx(1.0, abs=1e-12)
    assert oracle[0] > plain[0]


@settings(max_examples=50, deadline=None)
@given(
    x=hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)), elements=finite),
    seed=st.integers(0, 1000),
    mode=st.sampled_from(["direct", "decoupled"]),
    alpha=st.sampled_from([0.1, 1.0, 100.0]),
)
def test_assignment_rows_sum_to_one(x, seed, mode, alpha):
    cb = init_decoupled(np.random.default_rng(seed).standard_normal((4, x.shape[1])), alpha)
    a = ag.soft_assign(x, cb, mode)
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), N=st.integers(1, 12), K=st.integers(1, 5), D=st.integers(1, 4))
def test_uniform_attention_reduction(seed, N, K, D):
    r = np.random.default_rng(seed)
    X = r.standard_normal((N, D))
    cb = init_decoupled(r.standard_normal((K, D)), 1.0)
    a = ag.soft_assign(X, cb)
    plain = ag.normalize_vlad(ag.vlad_aggregate(X, a, cb)).v
    uni = ag.normalize_vlad(ag.vlad_aggregate(X, a, cb, np.full(N, 1 / N))).v
    np.testing.assert_allclose(uni, plain, atol=1e-6)
    assert np.linalg.norm(plain) == pytest.approx(1, abs=1e-6) or not plain.any()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.integers(-8, 8))
def test_translation_leaves_raw_vlad_unchanged(seed, shift):
    # integer-valued data keeps the shifted residuals bit-exact
    r = np.random.default_rng(seed)
    X = r.integers(-5, 6, (6, 3)).astype(float)
    centers = r.integers(-5, 6, (3, 3)).astype(float)
    cb = init_decoupled(centers, 1.0)
    a = ag.soft_assign(X, cb, "direct")
    c = float(shift)
    moved = init_decoupled(centers + c, 1.0)
    raw = ag.vlad_aggregate(X, a, cb)
    raw_moved = ag.vlad_aggregate(X + c, a, moved)
    assert np.array_equal(raw, raw_moved)
    np.testing.assert_allclose(ag.soft_assign(X + c, moved, "direct"), a, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), N=st.integers(1, 10))
def test_bow_entries_non_negative(seed, N):
    r = np.random.default_rng(seed)
    a = ag.soft_assign(r.standard_normal((N, 2)) * 3, init_decoupled(r.standard_normal((5, 2)), 10.0))
    assert np.all(ag.bow_aggregate(a, r.dirichlet(np.ones(N))).v >= 0)


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("name,builder", CASES["aggregation"], ids=[n for n, _ in CASES["aggregation"]])
def test_ops_match_finite_differences(name, builder, seed):
    rep = run_case(builder, seed=seed)
    assert rep.passed, rep.summary()
