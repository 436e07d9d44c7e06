import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from halrp import linalg
from halrp.linalg import InvalidRank, frobenius_norm, svd, truncate, truncation_error


def jacobi_eigenvalues(S, tol=1e-14, max_sweeps=100):
    """Classical two-sided cyclic Jacobi on a symmetric matrix (test oracle)."""
    A = np.array(S, dtype=float)
    n = A.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A ** 2) - np.sum(np.diag(A) ** 2))
        if off < tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]


def test_identity_and_diagonal():
    np.testing.assert_allclose(svd(np.eye(2)).sigma, [1, 1])
    f = svd(np.diag([3.0, 4.0]))
    np.testing.assert_allclose(f.sigma, [4, 3])
    np.testing.assert_allclose(f.reconstruct(), np.diag([3.0, 4.0]), atol=1e-14)


def test_sigma_squared_matches_gram_eigenvalues():
    M = np.random.default_rng(3).standard_normal((6, 4))
    f = svd(M)
    np.testing.assert_allclose(f.sigma ** 2, jacobi_eigenvalues(M.T @ M), atol=1e-8)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (5, 5), (9, 4), (4, 9), (64, 48)])
def test_factors_orthonormal_and_exact(shape):
    M = np.random.default_rng(sum(shape)).standard_normal(shape)
    f = svd(M)
    r = min(shape)
    assert f.U.shape == (shape[0], r) and f.V.shape == (shape[1], r)
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(r), atol=1e-12)
    np.testing.assert_allclose(f.V.T @ f.V, np.eye(r), atol=1e-12)
    np.testing.assert_allclose(f.reconstruct(), M, atol=1e-12)
    np.testing.assert_allclose(f.sigma, np.linalg.svd(M, compute_uv=False), rtol=1e-12, atol=1e-13)


def test_sign_convention_and_rank_deficient_basis():
    u = np.array([[1.0], [-2.0], [0.5]])
    M = u @ np.array([[2.0, -1.0]])
    f = svd(M)
    assert f.rank() == 1
    assert f.sigma[1] == 0.0
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(2), atol=1e-12)
    for j in range(2):
        col = f.U[:, j]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0


def test_zero_matrix():
    f = svd(np.zeros((3, 2)))
    assert np.all(f.sigma == 0) and f.rank() == 0
    np.testing.assert_allclose(f.U.T @ f.U, np.eye(2), atol=1e-12)


def test_deterministic():
    M = np.random.default_rng(0).standard_normal((12, 7))
    a, b = svd(M), svd(M)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.sigma, b.sigma) and np.array_equal(a.V, b.V)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.ones(3), np.array([[np.nan, 1.0]])])
def test_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        svd(bad)


def test_nonconvergence_raises(monkeypatch):
    monkeypatch.setattr(linalg, "MAX_SWEEPS", 0)
    with pytest.raises(linalg.NumericalFailure, match="did not converge"):
        svd(np.random.default_rng(0).standard_normal((4, 3)))


def test_truncate_examples():
    f = svd(np.diag([4.0, 3.0]))
    np.testing.assert_allclose(truncate(f, 1).reconstruct(), np.diag([4.0, 0.0]), atol=1e-14)
    assert np.all(truncate(f, 0).reconstruct() == 0)
    assert truncate(f, 0).reconstruct().shape == (2, 2)
    M = np.random.default_rng(1).standard_normal((5, 3))
    np.testing.assert_allclose(truncate(svd(M), 3).reconstruct(), M, atol=1e-6)
    with pytest.raises(InvalidRank):
        truncate(f, 3)


def test_truncation_error_examples():
    assert truncation_error(svd(np.eye(2)), 1) == pytest.approx(1.0)
    assert truncation_error(svd(np.diag([3.0, 4.0])), 1) == pytest.approx(3.0)
    M = np.random.default_rng(2).standard_normal((5, 5))
    f = svd(M)
    direct = np.sqrt(np.sum((M - truncate(f, 2).reconstruct()) ** 2))
    assert truncation_error(f, 2) == pytest.approx(direct, rel=1e-10)
    with pytest.raises(InvalidRank):
        truncation_error(f, -1)


def test_frobenius_norm():
    assert frobenius_norm(np.zeros((2, 3))) == 0.0
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    M = np.random.default_rng(4).standard_normal((4, 6))
    naive = 0.0
    for i in range(4):
        for j in range(6):
            naive += M[i, j] * M[i, j]
    assert frobenius_norm(M) == pytest.approx(np.sqrt(naive), rel=1e-14)


matrices = st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-10, 10, allow_nan=False, width=64)))


@settings(max_examples=150, deadline=None)
@given(matrices)
def test_property_reconstruction_and_ordering(M):
    f = svd(M)
    scale = max(1.0, frobenius_norm(M))
    assert np.all(np.diff(f.sigma) <= 0) and np.all(f.sigma >= 0)
    assert frobenius_norm(f.reconstruct() - M) <= 1e-12 * scale
    errs = [truncation_error(f, k) for k in range(len(f.sigma) + 1)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[0] == pytest.approx(frobenius_norm(M), rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("scale", [1e-300, 1e-150, 1e150, 1e300])
def test_extreme_magnitudes(scale):
    M = np.random.default_rng(9).standard_normal((5, 3))
    f = svd(M * scale)
    np.testing.assert_allclose(f.sigma / scale, svd(M).sigma, rtol=1e-12)
    np.testing.assert_allclose(f.reconstruct() / scale, M, atol=1e-12)
