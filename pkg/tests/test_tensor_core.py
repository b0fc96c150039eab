from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlmerge import tensor_core as tc
from xlmerge.errors import NumericError, ShapeError


def brute_matmul(a, b):
    """Textbook triple loop in pure Python floats."""
    m, n = len(a), len(a[0])
    p = len(b[0])
    return [[sum(a[i][j] * b[j][c] for j in range(n)) for c in range(p)] for i in range(m)]


def penrose_errors(A, X):
    return [
        tc.rel_error(A @ X @ A, A),
        tc.rel_error(X @ A @ X, X),
        tc.rel_error((A @ X).T, A @ X),
        tc.rel_error((X @ A).T, X @ A),
    ]


# -- element-wise ------------------------------------------------------------------


def test_ew_add_examples():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(tc.ew_add(a, np.zeros((2, 2))), a)
    assert np.array_equal(tc.ew_add(a, [[2, 0], [1, 1]]), [[3, 2], [4, 5]])
    assert np.array_equal(tc.ew_add(a, -a), np.zeros((2, 2)))


def test_ew_sub_examples():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(tc.ew_sub([[3, 2], [4, 5]], [[2, 0], [1, 1]]), a)
    assert np.array_equal(tc.ew_sub(a, a), np.zeros((2, 2)))
    assert np.array_equal(tc.ew_sub([5.0], [2.0]), [3.0])


def test_ew_mul_examples():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(tc.ew_mul(a, np.ones((2, 2))), a)
    assert np.array_equal(tc.ew_mul([2.0, 4], [3.0, 1]), [6, 4])
    assert np.array_equal(tc.ew_mul(a, np.zeros((2, 2))), np.zeros((2, 2)))


@pytest.mark.parametrize("op", [tc.ew_add, tc.ew_sub, tc.ew_mul, tc.ew_div])
def test_elementwise_shape_mismatch(op):
    with pytest.raises(ShapeError):
        op(np.ones((2, 2)), np.ones((2, 3)))


def test_ew_div_examples():
    assert np.array_equal(tc.ew_div([6.0, 4], [2.0, 2]), [3, 2])
    a = np.array([0.3, -2.5, 7.0])
    assert np.array_equal(tc.ew_div(a, a), np.ones(3))
    out, n = tc.ew_div([1.0], [0.0], eps=1e-8, return_count=True)
    assert out[0] == pytest.approx(1e8, rel=1e-15)
    assert n == 1


def test_ew_div_clamp_keeps_sign():
    out, n = tc.ew_div([1.0, 1.0, 1.0, 4.0], [-1e-12, 0.0, -0.0, 2.0], eps=1e-6, return_count=True)
    assert n == 3
    # Exact zeros of either sign clamp to +eps.
    assert out[0] == pytest.approx(-1e6) and out[1] == pytest.approx(1e6)
    assert out[2] == pytest.approx(1e6) and out[3] == 2.0


def test_ew_div_rejects_negative_eps():
    with pytest.raises(ValueError):
        tc.ew_div([1.0], [1.0], eps=-1.0)


def test_scale_examples():
    a = np.array([[1.0, 2]])
    assert np.array_equal(tc.scale(a, 0), np.zeros((1, 2)))
    assert np.array_equal(tc.scale(a, 1), a)
    assert np.array_equal(tc.scale(a, 0.5), [[0.5, 1]])


# -- matmul --------------------------------------------------------------------------


def test_matmul_examples():
    a = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(tc.matmul(np.eye(2), a), a)
    assert np.array_equal(tc.matmul(a, [[1.0], [1.0]]), [[3], [7]])
    assert np.array_equal(tc.matmul(a, np.zeros((2, 3))), np.zeros((2, 3)))


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        tc.matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_matches_brute_force(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    expected = np.array(brute_matmul(a.tolist(), b.tolist()))
    np.testing.assert_allclose(tc.matmul(a, b), expected, rtol=1e-13, atol=1e-13)


def test_matmul_bitwise_independent_of_threads(rng):
    pairs = [(rng.standard_normal((33, 40)), rng.standard_normal((40, 17))) for _ in range(16)]
    serial = [tc.matmul(a, b).tobytes() for a, b in pairs]
    with ThreadPoolExecutor(max_workers=8) as pool:
        threaded = list(pool.map(lambda ab: tc.matmul(*ab).tobytes(), pairs))
    assert serial == threaded


# -- svd / pinv ----------------------------------------------------------------------


def test_svd_diagonal():
    U, S, V = tc.svd(np.diag([3.0, 2.0]))
    np.testing.assert_allclose(S, [3, 2], rtol=1e-15)


def test_svd_ascending_diagonal_is_sorted():
    _, S, _ = tc.svd(np.diag([1.0, 5.0, 3.0]))
    np.testing.assert_allclose(S, [5, 3, 1], rtol=1e-15)


def test_svd_zeros():
    U, S, V = tc.svd(np.zeros((3, 2)))
    assert np.array_equal(S, [0.0, 0.0])
    np.testing.assert_allclose(U.T @ U, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(V.T @ V, np.eye(2), atol=1e-12)


@pytest.mark.parametrize("shape", [(4, 3), (3, 4), (1, 5), (5, 1), (9, 9)])
def test_svd_postconditions(rng, shape):
    a = rng.standard_normal(shape)
    U, S, V = tc.svd(a)
    r = min(shape)
    assert U.shape == (shape[0], r) and S.shape == (r,) and V.shape == (shape[1], r)
    assert tc.frobenius_norm(U * S @ V.T - a) <= 1e-10 * tc.frobenius_norm(a)
    assert np.all(S >= 0) and np.all(np.diff(S) <= 0)
    np.testing.assert_allclose(U.T @ U, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(r), atol=1e-10)
    # Independent reference for the singular values.
    np.testing.assert_allclose(S, np.linalg.svd(a, compute_uv=False), rtol=1e-12, atol=1e-14)


def test_svd_rank_deficient_has_orthonormal_u(rng):
    a = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 6))
    U, S, V = tc.svd(a)
    np.testing.assert_allclose(U.T @ U, np.eye(6), atol=1e-10)
    assert tc.frobenius_norm(U * S @ V.T - a) <= 1e-10 * tc.frobenius_norm(a)
    assert S[2] <= 1e-14 * S[0]


def test_svd_rejects_non_finite():
    with pytest.raises(NumericError):
        tc.svd(np.array([[1.0, np.nan]]))


def test_svd_reports_non_convergence(rng):
    with pytest.raises(tc.SvdConvergenceError):
        tc.svd(rng.standard_normal((6, 6)), max_sweeps=1)


def test_pinv_identity():
    np.testing.assert_allclose(tc.pinv(np.eye(3)), np.eye(3), rtol=0, atol=1e-15)


def test_pinv_rank_deficient_diagonal():
    np.testing.assert_allclose(tc.pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-16)


def test_pinv_random_3x2_penrose(rng):
    A = rng.standard_normal((3, 2))
    X = tc.pinv(A)
    assert X.shape == (2, 3)
    assert tc.rel_error(A @ X @ A, A) <= 1e-8
    np.testing.assert_allclose(X, np.linalg.pinv(A), rtol=1e-10, atol=1e-12)


def test_pinv_rtol_cutoff():
    A = np.diag([1.0, 1e-6])
    assert np.allclose(tc.pinv(A, rtol=1e-3), np.diag([1.0, 0.0]))
    assert np.allclose(tc.pinv(A, rtol=1e-9), np.diag([1.0, 1e6]))
    _, rank = tc.pinv(A, rtol=1e-3, return_rank=True)
    assert rank == 1


def test_pinv_of_zero_matrix():
    assert np.array_equal(tc.pinv(np.zeros((2, 3))), np.zeros((3, 2)))


def test_truncated_factors_recover_low_rank(rng):
    delta = rng.standard_normal((7, 3)) @ rng.standard_normal((3, 5))
    B, A = tc.truncated_factors(delta, 3)
    assert B.shape == (7, 3) and A.shape == (3, 5)
    assert tc.rel_error(B @ A, delta) <= 1e-12


def test_norm_and_rel_error():
    assert tc.frobenius_norm(np.array([[3.0, 4.0]])) == 5.0
    assert tc.frobenius_norm(np.zeros(3)) == 0.0
    assert tc.frobenius_norm(np.array([1e200, 1e200])) == pytest.approx(np.sqrt(2) * 1e200)
    assert tc.rel_error(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
    assert tc.rel_error(np.array([3.0, 4.0]), np.zeros(2)) > 1e300


# -- properties ----------------------------------------------------------------------

int_arrays = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(-(2**50), 2**50), min_size=n, max_size=n),
        st.lists(st.integers(-(2**50), 2**50), min_size=n, max_size=n),
    )
)


@given(int_arrays)
def test_add_then_sub_is_exact_for_integers(pair):
    a = np.array(pair[0], dtype=float)
    b = np.array(pair[1], dtype=float)
    assert np.array_equal(tc.ew_sub(tc.ew_add(a, b), b), a)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
away_from_zero = st.one_of(st.floats(1e-6, 1e6), st.floats(-1e6, -1e-6))
# Products with |b| >= 1e-6 must stay out of the subnormal range.
normal = st.one_of(st.just(0.0), st.floats(1e-290, 1e6), st.floats(-1e6, -1e-290))


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=8))
def test_add_then_sub_close_for_reals(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    back = tc.ew_sub(tc.ew_add(a, b), b)
    scale = np.maximum(np.abs(a), np.abs(b))
    assert np.all(np.abs(back - a) <= 1e-12 * scale)


@given(st.lists(st.tuples(normal, away_from_zero), min_size=1, max_size=8))
def test_mul_then_div_roundtrip(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    back = tc.ew_div(tc.ew_mul(a, b), b, eps=1e-8)
    np.testing.assert_allclose(back, a, rtol=1e-12, atol=0)


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(1, 64),
    n=st.integers(1, 64),
    deficiency=st.integers(0, 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_pinv_penrose_conditions(m, n, deficiency, seed):
    rng = np.random.default_rng(seed)
    rank = max(1, min(m, n) - deficiency)
    A = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    X = tc.pinv(A)
    assert max(penrose_errors(A, X)) <= 1e-8
