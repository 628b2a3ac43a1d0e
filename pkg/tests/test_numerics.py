import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gdinfer.numerics import (GramFactor, IndefiniteBeyondTolerance, NotSymmetric, OutOfRange,
                              RngStream, RowBuffer, SingularDiagonal, cholesky, extend_cholesky,
                              is_lower_triangular, pad_corner, resolvent_last_row,
                              sample_gaussian, std_normal_quantile, tri_inverse)

finite = st.floats(-10, 10, allow_nan=False)


def random_lower(rng, t, diag_low=0.5):
    M = np.tril(rng.standard_normal((t, t)), -1)
    signs = rng.choice([-1.0, 1.0], t)
    M[np.diag_indices(t)] = signs * rng.uniform(diag_low, 2.0, t)
    return M


# -- pad_corner ---------------------------------------------------------------


def test_pad_corner_empty_gives_one_by_one_zero():
    np.testing.assert_array_equal(pad_corner(np.zeros((0, 0))), [[0.0]])


def test_pad_corner_scalar():
    np.testing.assert_array_equal(pad_corner([[2.5]]), [[0, 0], [2.5, 0]])


def test_pad_corner_two_by_two():
    np.testing.assert_array_equal(pad_corner([[1, 0], [2, 3]]), [[0, 0, 0], [1, 0, 0], [2, 3, 0]])


def test_pad_corner_rejects_non_square():
    with pytest.raises(ValueError):
        pad_corner(np.ones((2, 3)))


@given(st.integers(1, 8).flatmap(lambda t: arrays(float, (t, t), elements=finite)))
def test_pad_corner_zero_first_row_and_last_column(M):
    P = pad_corner(M)
    assert not P[0].any()
    assert not P[:, -1].any()
    np.testing.assert_array_equal(P[1:, :-1], M)


# -- tri_inverse --------------------------------------------------------------


def test_tri_inverse_identity():
    np.testing.assert_array_equal(tri_inverse(np.eye(4)), np.eye(4))


def test_tri_inverse_diagonal():
    np.testing.assert_allclose(tri_inverse([[2, 0], [0, 4]]), [[0.5, 0], [0, 0.25]])


def test_tri_inverse_two_by_two_closed_form():
    # [[1/a, 0], [-b/(ac), 1/c]] with a = c = -0.36, b = 0.1
    inv = tri_inverse([[-0.36, 0], [0.1, -0.36]])
    np.testing.assert_allclose(inv, [[-2.77778, 0], [-0.77160, -2.77778]], atol=1e-5)


def test_tri_inverse_singular_diagonal():
    with pytest.raises(SingularDiagonal):
        tri_inverse([[1.0, 0], [3.0, 0.0]])


def test_tri_inverse_rejects_upper_entries():
    with pytest.raises(ValueError):
        tri_inverse([[1.0, 1.0], [0.0, 1.0]])


@settings(max_examples=50)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_tri_inverse_is_inverse_and_involution(t, seed):
    M = random_lower(np.random.default_rng(seed), t)
    inv = tri_inverse(M)
    assert is_lower_triangular(inv)
    np.testing.assert_allclose(M @ inv, np.eye(t), atol=1e-10)
    np.testing.assert_allclose(tri_inverse(inv), M, atol=1e-8)


# -- cholesky -----------------------------------------------------------------


def test_cholesky_identity():
    np.testing.assert_allclose(cholesky(np.eye(3)), np.eye(3), atol=1e-9)


def test_cholesky_scalar():
    np.testing.assert_allclose(cholesky([[4.0]]), [[2.0]], atol=1e-9)


def test_cholesky_reproduces_two_by_two():
    S = np.array([[2.0, 1.0], [1.0, 2.0]])
    C = cholesky(S)
    np.testing.assert_allclose(C @ C.T, S, atol=1e-9)


def test_cholesky_clips_tiny_negative_eigenvalue():
    v = np.array([1.0, -1.0]) / np.sqrt(2)
    S = np.eye(2) - (1 + 1e-9) * np.outer(v, v)
    C = cholesky(S)
    assert np.all(np.isfinite(C))
    assert np.linalg.norm(C @ C.T - S) <= 1e-8


def test_cholesky_rejects_asymmetric():
    with pytest.raises(NotSymmetric):
        cholesky([[1.0, 0.5], [0.0, 1.0]])


def test_cholesky_rejects_indefinite():
    with pytest.raises(IndefiniteBeyondTolerance):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


@settings(max_examples=40)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_cholesky_relative_frobenius_error(t, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((t, t + 2))
    S = X @ X.T
    C = cholesky(S)
    assert is_lower_triangular(C)
    assert np.linalg.norm(C @ C.T - S) <= 1e-8 * np.linalg.norm(S) + 1e-9


def test_extend_cholesky_keeps_leading_block():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 10))
    S = X @ X.T / 10
    C = np.zeros((0, 0))
    for k in range(4):
        C = extend_cholesky(C, S[k, :k + 1])
    np.testing.assert_allclose(C @ C.T, S, atol=1e-12)
    np.testing.assert_allclose(C, np.linalg.cholesky(S), atol=1e-12)


def test_sample_gaussian_empirical_covariance():
    S = np.array([[2.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 0.5]])
    draws = sample_gaussian(cholesky(S), 1_000_000, RngStream(11))
    emp = draws.T @ draws / draws.shape[0]
    assert np.linalg.norm(emp - S) <= 0.01 * np.linalg.norm(S)


# -- GramFactor -----------------------------------------------------------------


def test_gram_factor_matches_empirical_gram():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((500, 5))
    g = GramFactor(500)
    for k in range(5):
        g.append(X[:, k])
    np.testing.assert_allclose(g.L @ g.L.T, X.T @ X / 500, atol=1e-12)


def test_gram_factor_dependent_column_gets_zero_pivot():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 200))
    g = GramFactor(200)
    for x in (a, b, 2 * a - b):
        g.append(x)
    assert g.L[2, 2] == 0.0
    X = np.stack([a, b, 2 * a - b], axis=1)
    np.testing.assert_allclose(g.L @ g.L.T, X.T @ X / 200, atol=1e-12)


# -- RowBuffer --------------------------------------------------------------------


def test_row_buffer_grows_and_is_read_only():
    buf = RowBuffer(3, capacity=1)
    rows = np.arange(15.0).reshape(5, 3)
    for r in rows:
        buf.append(r)
    np.testing.assert_array_equal(buf.view(), rows)
    np.testing.assert_array_equal(buf.view(2), rows[:2])
    with pytest.raises(ValueError):
        buf.view()[0, 0] = 1.0


# -- quantile ---------------------------------------------------------------------


@pytest.mark.parametrize("p, z", [(0.5, 0.0), (0.025, 1.959964), (0.975, -1.959964)])
def test_std_normal_quantile_values(p, z):
    assert std_normal_quantile(p) == pytest.approx(z, abs=1e-6)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_std_normal_quantile_out_of_range(p):
    with pytest.raises(OutOfRange):
        std_normal_quantile(p)


@given(st.floats(1e-12, 1 - 1e-12))
def test_std_normal_quantile_upper_tail(p):
    from scipy.stats import norm
    assert norm.sf(std_normal_quantile(p)) == pytest.approx(p, rel=1e-8, abs=1e-15)


# -- resolvent rows ---------------------------------------------------------------


@settings(max_examples=40)
@given(st.integers(1, 9), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_resolvent_last_row_matches_explicit_inverse(t, N, seed):
    rng = np.random.default_rng(seed)
    K = np.tril(rng.standard_normal((t, t)), -1)
    D = rng.uniform(-1, 1, (N, t))
    got = resolvent_last_row(D, K)
    for k in range(N):
        R = np.linalg.solve(np.eye(t) - np.diag(D[k]) @ K, np.diag(D[k]))
        np.testing.assert_allclose(got[k], R[-1], atol=1e-10)


def test_resolvent_single_row_path_agrees_with_sweep():
    rng = np.random.default_rng(5)
    K = np.tril(rng.standard_normal((6, 6)), -1)
    d = rng.standard_normal(6)
    single = resolvent_last_row(d[None, :], K)
    swept = resolvent_last_row(np.stack([d, d]), K)
    np.testing.assert_allclose(single[0], swept[0], atol=1e-13)
    np.testing.assert_allclose(swept[0], swept[1], atol=0)


# -- RngStream ----------------------------------------------------------------------


def test_rng_same_seed_same_bytes():
    a = RngStream(7, 3).normal(1000).tobytes()
    b = RngStream(7, 3).normal(1000).tobytes()
    assert a == b


def test_rng_streams_and_children_differ():
    base = RngStream(7, 3)
    draws = [RngStream(7, 4).normal(50), base.child(0).normal(50), base.child(1).normal(50),
             RngStream(8, 3).normal(50), base.normal(50)]
    for i in range(len(draws)):
        for j in range(i + 1, len(draws)):
            assert not np.allclose(draws[i], draws[j])


def test_rng_child_independent_of_parent_consumption():
    parent = RngStream(1, 2)
    expected = parent.child(4).normal(20)
    parent.normal(10_000)
    np.testing.assert_array_equal(parent.child(4).normal(20), expected)


def test_rng_position_advances():
    s = RngStream(0)
    before = s.position
    s.normal(100)
    assert s.position > before
