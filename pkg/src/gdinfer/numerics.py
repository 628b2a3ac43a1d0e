"""Small dense linear algebra, Gaussian sampling and reproducible RNG streams."""

from __future__ import annotations

import numpy as np
from scipy.linalg.lapack import dtrtrs
from scipy.stats import norm

PSD_TOL = 1e-8
JITTER = 1e-10


class NumericsError(ValueError):
    pass


class SingularDiagonal(NumericsError):
    pass


class NotSymmetric(NumericsError):
    pass


class IndefiniteBeyondTolerance(NumericsError):
    pass


class OutOfRange(NumericsError):
    pass


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox-4x64 bit generator: the 128-bit key holds the seed and
    the stream id, so replication ``r`` can use ``stream_id=r`` regardless of
    the order in which replications execute. Sub-streams occupy disjoint
    regions of the counter space (the top counter word).
    """

    def __init__(self, seed: int, stream_id: int = 0, substream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.substream = int(substream)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        counter = np.array([0, 0, 0, self.substream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key, counter=counter)
        self.generator = np.random.Generator(self._bitgen)

    @property
    def position(self) -> int:
        """Low 64 bits of the Philox block counter."""
        return int(self._bitgen.state["state"]["counter"][0])

    def child(self, j: int) -> "RngStream":
        """Independent stream sharing the key, offset in the counter space."""
        return RngStream(self.seed, self.stream_id, substream=self.substream + 1 + j)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, substream={self.substream})"


def is_lower_triangular(M: np.ndarray) -> bool:
    M = np.asarray(M)
    return M.ndim == 2 and M.shape[0] == M.shape[1] and not np.any(np.triu(M, 1))


def pad_corner(M: np.ndarray) -> np.ndarray:
    """Embed a (t-1)x(t-1) matrix in the lower-left corner of a zero t x t matrix.

    The first row and the last column of the result are zero; an empty input
    yields the 1x1 zero matrix.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((1, 1))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"pad_corner expects a square matrix, got shape {M.shape}")
    t = M.shape[0] + 1
    out = np.zeros((t, t))
    out[1:, :-1] = M
    return out


def tri_inverse(M: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Inverse of a lower-triangular matrix by forward substitution."""
    M = np.asarray(M, dtype=float)
    if not is_lower_triangular(M):
        raise ValueError("tri_inverse expects a square lower-triangular matrix")
    d = np.diag(M)
    bad = np.flatnonzero(np.abs(d) <= tol)
    if bad.size:
        raise SingularDiagonal(f"diagonal entry {bad[0]} is {d[bad[0]]!r}")
    t = M.shape[0]
    inv = np.zeros_like(M)
    for r in range(t):
        inv[r, r] = 1.0 / d[r]
        if r:
            inv[r, :r] = -(M[r, :r] @ inv[:r, :r]) / d[r]
    return inv


def cholesky(sigma: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Lower Cholesky factor of the PSD projection of a symmetric matrix.

    Negative eigenvalues down to ``-tol`` (relative to the largest magnitude,
    floored at 1) are clipped to zero and a ``JITTER`` ridge is added before
    factoring.
    """
    S = np.atleast_2d(np.asarray(sigma, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise NotSymmetric(f"matrix is not square: {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S))) if S.size else 1.0)
    if not np.allclose(S, S.T, rtol=0, atol=1e-10 * scale):
        raise NotSymmetric("matrix is not symmetric")
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.size and vals.min() < -tol * scale:
        raise IndefiniteBeyondTolerance(f"smallest eigenvalue {vals.min():.3e}")
    if vals.size and vals.min() < 0:
        S = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    S = S + JITTER * np.eye(S.shape[0])
    return np.linalg.cholesky(S)


def extend_cholesky(C: np.ndarray, row: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Append one row/column to a lower Cholesky factor.

    ``row`` holds the covariances of the new coordinate with the existing ones
    followed by its variance. The leading block of the returned factor is ``C``
    itself, so draws made with the old factor stay valid. A slightly negative
    Schur complement (round-off, Monte Carlo noise) is clipped to zero; zero
    pivots contribute no new direction.
    """
    row = np.asarray(row, dtype=float)
    t = row.size - 1
    C = np.asarray(C, dtype=float).reshape(t, t)
    new = np.zeros((t + 1, t + 1))
    new[:t, :t] = C
    coef = np.zeros(t)
    for j in range(t):
        if C[j, j] > 0:
            coef[j] = (row[j] - coef[:j] @ C[j, :j]) / C[j, j]
    schur = row[t] - coef @ coef
    scale = max(1.0, abs(row[t]))
    if schur < -tol * scale:
        raise IndefiniteBeyondTolerance(f"Schur complement {schur:.3e} for new coordinate {t}")
    new[t, :t] = coef
    new[t, t] = np.sqrt(max(schur, 0.0))
    return new


class RowBuffer:
    """Append-only stack of equal-length rows with amortized O(1) growth."""

    def __init__(self, width: int, capacity: int = 8):
        self._data = np.zeros((max(capacity, 1), width))
        self.size = 0

    def append(self, row) -> None:
        if self.size == self._data.shape[0]:
            grown = np.zeros((2 * self.size, self._data.shape[1]))
            grown[:self.size] = self._data
            self._data = grown
        self._data[self.size] = row
        self.size += 1

    def view(self, rows: int | None = None) -> np.ndarray:
        """Read-only (rows, width) view of the first ``rows`` rows."""
        v = self._data[:self.size if rows is None else rows]
        v = v.view()
        v.setflags(write=False)
        return v


class GramFactor:
    """Incremental Cholesky factor of a sample Gram matrix ``X^T X / N``.

    Columns of X arrive one at a time; each is orthogonalized against the
    earlier ones (classical Gram-Schmidt, applied twice), so the factor is
    exact for the empirical Gram matrix and never indefinite. A column lying
    in the span of its predecessors gets a zero pivot.
    """

    def __init__(self, N: int, rel_tol: float = 1e-12):
        self.N = N
        self.rel_tol = rel_tol
        self._Q = RowBuffer(N)  # unit vectors in the sample space (or zero), one per row
        self.L = np.zeros((0, 0))

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def append(self, x: np.ndarray) -> np.ndarray:
        """Add a column; returns the new row of the factor."""
        x = np.asarray(x, dtype=float)
        t = self.dim
        coef = np.zeros(t)
        r = x.copy()
        if t:
            Q = self._Q.view()
            for _ in range(2):
                c = Q @ r
                r -= c @ Q
                coef += c
        norm = float(np.sqrt(r @ r))
        if norm <= self.rel_tol * max(float(np.sqrt(x @ x)), 1e-300):
            norm = 0.0
            q = np.zeros_like(r)
        else:
            q = r / norm
        self._Q.append(q)
        scale = np.sqrt(self.N)
        row = np.append(coef, norm) / scale
        L = np.zeros((t + 1, t + 1))
        L[:t, :t] = self.L
        L[t] = row
        self.L = L
        return row


def sample_gaussian(factor: np.ndarray, size: int, rng: RngStream) -> np.ndarray:
    """``size`` draws from N(0, C C^T), returned as a (size, dim) array."""
    factor = np.atleast_2d(factor)
    eps = rng.normal((size, factor.shape[0]))
    return eps @ factor.T


def std_normal_quantile(p: float) -> float:
    """Upper-tail quantile: the z with P(N(0,1) > z) = p."""
    if not 0.0 < p < 1.0:
        raise OutOfRange(f"probability must lie in (0, 1), got {p}")
    return float(norm.isf(p))


def resolvent_last_row(D: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Last row of ``(I - diag(d) K)^{-1} diag(d)`` for every row ``d`` of ``D``.

    ``K`` must be strictly lower triangular, so the matrix being inverted is
    unit lower triangular. The row is obtained by a backward (adjoint) sweep:
    with ``a_t = 1`` and ``a_j = sum_{r>j} a_r d_r K[r, j]`` the answer is
    ``a * d``. Costs O(N t^2) and needs no per-row matrix storage.

    D: (N, t) diagonals; K: (t, t). Returns an (N, t) array.
    """
    D = np.asarray(D, dtype=float)
    N, t = D.shape
    if N == 1:
        # one row: a single triangular solve with (I - diag(d) K)^T
        # (the unit diagonal is implied, so the identity is never formed)
        d = D[0]
        e = np.zeros(t)
        e[-1] = 1.0
        a, info = dtrtrs(-d[:, None] * K, e, lower=1, trans=1, unitdiag=1)
        return (a * d)[None, :]
    DT = np.ascontiguousarray(D.T)
    B = np.zeros((t, N))
    B[t - 1] = DT[t - 1]
    for j in range(t - 2, -1, -1):
        B[j] = (K[j + 1:, j] @ B[j + 1:]) * DT[j]
    return B.T
