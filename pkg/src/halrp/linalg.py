"""Dense linear algebra kernels: one-sided Jacobi SVD, rank truncation, norms.

Everything downstream (warm-start decomposition, rank scoring, reconstruction)
goes through :func:`svd` and :func:`truncate`, so the factor conventions here
are load-bearing:

* economy size: ``U`` is ``J x r``, ``V`` is ``I x r`` with ``r = min(J, I)``;
* ``sigma`` is sorted in descending order;
* the first nonzero entry of every ``U`` column is nonnegative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 60
OFF_DIAGONAL_TOL = 1e-12
RANK_TOL = 1e-12


class NumericalFailure(RuntimeError):
    """Raised when the Jacobi iteration does not converge."""

    def __init__(self, shape, sweeps):
        self.shape = tuple(shape)
        self.sweeps = sweeps
        super().__init__(
            f"SVD of {self.shape[0]}x{self.shape[1]} matrix did not converge "
            f"after {sweeps} sweeps"
        )


class InvalidRank(ValueError):
    pass


@dataclass
class SVDFactors:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    def rank(self) -> int:
        """Numerical rank, ignoring singular values below ``RANK_TOL * sigma[0]``."""
        if self.sigma.size == 0 or self.sigma[0] == 0.0:
            return 0
        return int(np.count_nonzero(self.sigma > RANK_TOL * self.sigma[0]))


@dataclass
class LowRankFactors:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    def copy(self) -> "LowRankFactors":
        return LowRankFactors(self.U.copy(), self.sigma.copy(), self.V.copy())


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: n-1 rounds of disjoint column pairs that
    # together visit every pair exactly once. Index n marks a bye.
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        if p:
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``A`` (m >= n) by plane rotations.

    Returns the rotated matrix and the accumulated right rotation ``V`` such
    that ``A_in @ V == A_out``.
    """
    m, n = A.shape
    A = A.copy()
    V = np.eye(n)
    schedule = _round_robin(n)
    # columns below this squared norm are rounding noise and count as converged
    floor = (np.finfo(np.float64).eps * np.sqrt(np.sum(A * A))) ** 2
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in schedule:
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > OFF_DIAGONAL_TOL * np.sqrt(alpha * beta)
            active &= np.minimum(alpha, beta) > floor
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = A[:, p], A[:, q]
            A[:, p] = c * ap - s * aq
            A[:, q] = s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        if not rotated:
            return A, V
    raise NumericalFailure(A.shape, MAX_SWEEPS)


def _complete_basis(Q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # Replace the columns not in `keep` with unit vectors orthogonal to the
    # kept ones (Gram-Schmidt against the standard basis, twice for stability).
    m, n = Q.shape
    out = Q.copy()
    basis = [out[:, j] for j in range(n) if keep[j]]
    e = 0
    for j in range(n):
        if keep[j]:
            continue
        while e < m:
            v = np.zeros(m)
            v[e] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                v /= norm
                break
        out[:, j] = v
        basis.append(v)
    return out


def svd(M) -> SVDFactors:
    """Economy SVD of a real matrix by one-sided Jacobi rotations.

    Deterministic for identical input. Raises :class:`NumericalFailure` if
    the off-diagonal mass has not dropped below tolerance after
    ``MAX_SWEEPS`` sweeps.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ValueError(f"svd expects a nonempty 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("svd input contains non-finite entries")
    transposed = M.shape[0] < M.shape[1]
    A = M.T if transposed else M
    # work at unit scale so squared column norms neither underflow nor overflow
    peak = float(np.abs(A).max())
    if peak > 0:
        A = A / peak
    try:
        A, V = _jacobi_columns(A)
    except NumericalFailure:
        raise NumericalFailure(M.shape, MAX_SWEEPS) from None

    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, A, V = sigma[order], A[:, order], V[:, order]
    keep = sigma > RANK_TOL * sigma[0] if sigma[0] > 0 else np.zeros_like(sigma, dtype=bool)
    U = np.zeros_like(A)
    U[:, keep] = A[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    U = _complete_basis(U, keep)
    if peak > 0:
        sigma = sigma * peak

    if transposed:
        U, V = V, U
    for j in range(U.shape[1]):
        col = U[:, j]
        lead = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if lead.size and col[lead[0]] < 0:
            U[:, j] = -col
            V[:, j] = -V[:, j]
    return SVDFactors(U, sigma, V)


def truncate(f: SVDFactors, k: int) -> LowRankFactors:
    """Keep the leading ``k`` singular triplets."""
    r = f.sigma.shape[0]
    if not 0 <= k <= r:
        raise InvalidRank(f"rank {k} outside [0, {r}]")
    return LowRankFactors(f.U[:, :k].copy(), f.sigma[:k].copy(), f.V[:, :k].copy())


def truncation_error(f: SVDFactors, k: int) -> float:
    """Frobenius distance between the matrix and its rank-``k`` truncation."""
    r = f.sigma.shape[0]
    if not 0 <= k <= r:
        raise InvalidRank(f"rank {k} outside [0, {r}]")
    return _scaled_norm(f.sigma[k:])


def _scaled_norm(x: np.ndarray) -> float:
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak == 0.0:
        return 0.0
    y = x / peak
    return peak * float(np.sqrt(np.sum(y * y)))


def frobenius_norm(M) -> float:
    """Square root of the sum of squares, rescaled so tiny or huge entries survive."""
    return _scaled_norm(np.asarray(M, dtype=np.float64))
