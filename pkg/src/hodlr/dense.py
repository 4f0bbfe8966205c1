"""Small dense kernels shared by the compression and factorization code.

Everything here works on plain ``numpy`` arrays.  Matrices larger than
:data:`SMALL_MATRIX_CAP` in either dimension are refused by the cubic-cost
routines so that nothing silently falls back to an O(N^3) path.
"""

from __future__ import annotations

import errno
import os

import numpy as np
import scipy.io
import scipy.linalg as la

__all__ = [
    "SMALL_MATRIX_CAP",
    "RngStream",
    "randn",
    "orthog",
    "small_svd",
    "sym_eig",
    "spectral_norm_estimate",
    "read_matrix_market",
    "write_matrix_market",
]

SMALL_MATRIX_CAP = 4096


def _as_finite_2d(M, name="M"):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


class RngStream:
    """Counter-based random stream (Philox) keyed by ``(seed, *key)``.

    Streams are single-owner.  Use :meth:`split` to derive independent
    substreams, e.g. one per off-diagonal block, so that results do not
    depend on the order in which blocks are processed.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.position = 0

    def split(self, *index: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(index))

    def normal(self, rows: int, cols: int) -> np.ndarray:
        # column-major fill: drawing k1 then k2 columns equals drawing k1 + k2
        z = self._gen.standard_normal(rows * cols)
        self.position += rows * cols
        return z.reshape((rows, cols), order="F")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key}, position={self.position})"


def randn(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """iid standard normal ``rows x cols`` matrix drawn from ``rng``."""
    if rows < 1 or cols < 1:
        raise ValueError("randn needs rows, cols >= 1")
    return rng.normal(rows, cols)


def orthog(M) -> tuple[np.ndarray, int]:
    """Orthonormal basis for the columns of a tall matrix.

    Householder QR with the sign convention ``diag(R) >= 0``, so an input
    that is already orthonormal comes back unchanged.

    Returns
    -------
    Q : (m, k) ndarray
        Orthonormal columns with ``range(M) ⊆ range(Q)``.  Columns beyond the
        numerical rank are still orthonormal, just arbitrary.
    rank : int
        Effective numerical rank of ``M``.
    """
    M = _as_finite_2d(M)
    m, k = M.shape
    if m < k:
        raise ValueError(f"orthog needs rows >= cols, got {M.shape}")
    if k == 0:
        return np.zeros((m, 0)), 0
    Q, R = la.qr(M, mode="economic")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    Q = Q * signs
    s = la.svdvals(R)
    tol = max(m, k) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol)) if s.size and s[0] > 0 else 0
    return Q, rank


def small_svd(M, cap: int = SMALL_MATRIX_CAP):
    """Thin SVD ``M = U diag(sigma) V^T`` of a small dense matrix.

    Uses the divide-and-conquer driver and falls back to the QR-iteration
    driver if that fails to converge.
    """
    M = _as_finite_2d(M)
    if max(M.shape) > cap:
        raise ValueError(f"matrix {M.shape} exceeds small-matrix cap {cap}")
    try:
        U, s, Vt = la.svd(M, full_matrices=False, lapack_driver="gesdd")
    except la.LinAlgError:
        try:
            U, s, Vt = la.svd(M, full_matrices=False, lapack_driver="gesvd")
        except la.LinAlgError as exc:
            raise la.LinAlgError(f"SVD did not converge for shape {M.shape}: {exc}") from exc
    return U, s, Vt.T


def sym_eig(M, cap: int = SMALL_MATRIX_CAP, rtol: float = 1e-12):
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    M = _as_finite_2d(M)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got {M.shape}")
    if M.shape[0] > cap:
        raise ValueError(f"matrix {M.shape} exceeds small-matrix cap {cap}")
    scale = np.max(np.abs(M)) if M.size else 0.0
    if np.max(np.abs(M - M.T), initial=0.0) > rtol * max(scale, np.finfo(float).tiny):
        raise ValueError("sym_eig input is not symmetric to tolerance")
    lam, V = la.eigh((M + M.T) / 2)
    return lam, V


def _apply(op, X):
    if hasattr(op, "apply"):
        return op.apply(X)
    return np.asarray(op) @ X


def spectral_norm_estimate(op, iters: int = 50, rng: RngStream | None = None) -> float:
    """Power-iteration estimate of the largest ``|eigenvalue|`` of a symmetric operator.

    For symmetric operators the successive ratios ``||A^{k+1} x|| / ||A^k x||``
    never decrease, so the estimate is monotone in ``iters`` for a fixed seed
    and never exceeds the true norm (up to rounding).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng if rng is not None else RngStream(0)
    n = op.shape[0]
    x = rng.normal(n, 1)[:, 0]
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = np.asarray(_apply(op, x[:, None]))[:, 0]
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            return 0.0
        est = max(est, ny)
        x = y / ny
    return est


def read_matrix_market(path) -> np.ndarray:
    """Read a dense matrix from a Matrix Market file (array or coordinate)."""
    if not os.path.isfile(path):
        raise FileNotFoundError(errno.ENOENT, "no such Matrix Market file", str(path))
    A = scipy.io.mmread(str(path))
    if hasattr(A, "toarray"):
        A = A.toarray()
    return _as_finite_2d(A, "matrix market data")


def write_matrix_market(path, A) -> None:
    """Write ``A`` in ``%%MatrixMarket matrix array real general`` form."""
    A = _as_finite_2d(A)
    scipy.io.mmwrite(str(path), A, field="real", symmetry="general")
