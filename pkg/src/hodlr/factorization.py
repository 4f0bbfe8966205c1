"""Symmetric factorization ``H = W W^T`` of an SPD HODLR matrix.

Bottom-up construction.  With ``Lc`` the block-diagonal matrix of leaf
Cholesky factors,::

    W = Lc G_L G_{L-1} ... G_1

where ``G_l`` is block diagonal over the parents of the level-``l`` sibling
pairs.  For one pair with children factors ``W_1, W_2`` and upper block
``U S V^T``, the parent block is::

    [[W_1, 0], [0, W_2]] (I + X C X^T) [[W_1, 0], [0, W_2]]^T,
    X = blkdiag(W_1^{-1} U, W_2^{-1} V),  C = [[0, S], [S, 0]].

With ``X = Q R`` (one QR per child) and ``I + R C R^T = E diag(mu) E^T`` the
middle factor is ``G^2`` for the symmetric ``G = I + Q T Q^T``,
``T = E (diag(sqrt(mu)) - I) E^T``.  Its inverse is ``I + Q T' Q^T`` with
``T' = E (diag(1/sqrt(mu)) - I) E^T``.  ``mu > 0`` for every pair together
with positive-definite leaves is equivalent to ``H`` being SPD (congruence),
so the construction doubles as an exact SPD test.

Factorization costs O(N log^2 N) at fixed rank; each apply of ``W``,
``W^{-1}``, ``W^T``, ``W^{-T}`` costs O(N log N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .core import FlopCounter, HodlrMatrix, apply as hodlr_apply, densify
from .dense import RngStream, orthog, sym_eig

__all__ = [
    "NotSPDError",
    "HodlrFactorization",
    "factorize_spd",
    "solve",
    "sqrt_apply",
    "inv_sqrt_apply",
    "factor_residual",
]

DENSE_CHECK_CAP = 1024


class NotSPDError(ValueError):
    pass


def _tick(flops, n):
    if flops is not None:
        flops.add(n)


@dataclass(frozen=True)
class _PairUpdate:
    a: int
    b: int
    c: int
    Q1: np.ndarray
    Q2: np.ndarray
    T: np.ndarray
    Tinv: np.ndarray

    def apply(self, X, inverse: bool, flops=None):
        """``X <- (I + Q T Q^T) X`` in place on rows ``a:c``."""
        k = self.Q1.shape[1]
        if k == 0:
            return
        T = self.Tinv if inverse else self.T
        w = np.vstack([self.Q1.T @ X[self.a:self.b], self.Q2.T @ X[self.b:self.c]])
        t = T @ w
        X[self.a:self.b] += self.Q1 @ t[:k]
        X[self.b:self.c] += self.Q2 @ t[k:]
        _tick(flops, (2 * 2 * (self.c - self.a) * k + 4 * k * k) * X.shape[1])


@dataclass(frozen=True)
class HodlrFactorization:
    """``W`` with ``W W^T = H``; ``levels[l - 1]`` holds the updates ``G_l``."""

    source: HodlrMatrix
    leaf_chol: tuple
    levels: tuple
    residual: float

    @property
    def n(self) -> int:
        return self.source.n

    def _cols(self, z):
        z = np.array(z, dtype=float)
        vec = z.ndim == 1
        if vec:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got shape {z.shape}")
        return z, vec

    def _leaf(self, X, how, flops=None):
        for (a, b), Lf in zip(self.source.partition.leaves, self.leaf_chol):
            if how == "L":
                X[a:b] = Lf @ X[a:b]
            elif how == "Linv":
                X[a:b] = la.solve_triangular(Lf, X[a:b], lower=True)
            elif how == "LT":
                X[a:b] = Lf.T @ X[a:b]
            else:
                X[a:b] = la.solve_triangular(Lf, X[a:b], lower=True, trans="T")
            _tick(flops, (b - a) ** 2 * X.shape[1])

    def _updates(self, X, order, inverse, flops=None):
        for level in order:
            for u in self.levels[level - 1]:
                u.apply(X, inverse, flops)

    def apply_w(self, z, flops: FlopCounter | None = None):
        """``W z = Lc G_L ... G_1 z``."""
        X, vec = self._cols(z)
        self._updates(X, range(1, len(self.levels) + 1), False, flops)
        self._leaf(X, "L", flops)
        return X[:, 0] if vec else X

    def apply_wt(self, z, flops: FlopCounter | None = None):
        """``W^T z = G_1 ... G_L Lc^T z``."""
        X, vec = self._cols(z)
        self._leaf(X, "LT", flops)
        self._updates(X, range(len(self.levels), 0, -1), False, flops)
        return X[:, 0] if vec else X

    def apply_winv(self, z, flops: FlopCounter | None = None):
        """``W^{-1} z = G_1^{-1} ... G_L^{-1} Lc^{-1} z``."""
        X, vec = self._cols(z)
        self._leaf(X, "Linv", flops)
        self._updates(X, range(len(self.levels), 0, -1), True, flops)
        return X[:, 0] if vec else X

    def apply_winvt(self, z, flops: FlopCounter | None = None):
        """``W^{-T} z = Lc^{-T} G_L^{-1} ... G_1^{-1} z``."""
        X, vec = self._cols(z)
        self._updates(X, range(1, len(self.levels) + 1), True, flops)
        self._leaf(X, "LinvT", flops)
        return X[:, 0] if vec else X


def _partial_inverse(leaf_chol, levels_done, partition, X):
    """Apply ``(Lc G_L ... G_{l+1})^{-1}`` restricted blockwise, in place."""
    for (a, b), Lf in zip(partition.leaves, leaf_chol):
        X[a:b] = la.solve_triangular(Lf, X[a:b], lower=True)
    for ups in levels_done:  # finest first
        for u in ups:
            u.apply(X, True)
    return X


def factor_residual(F: HodlrFactorization, rng: RngStream | None = None, iters: int = 20) -> float:
    """``||W W^T - H||_2 / ||H||_2``, dense up to ``DENSE_CHECK_CAP``, else power iteration."""
    H = F.source
    if H.n <= DENSE_CHECK_CAP:
        A = densify(H)
        WWt = F.apply_w(F.apply_wt(np.eye(H.n)))
        nrm = np.linalg.norm(A, 2)
        return float(np.linalg.norm(WWt - A, 2) / nrm) if nrm > 0 else 0.0
    rng = rng if rng is not None else RngStream(0)
    x = rng.normal(H.n, 1)
    x /= np.linalg.norm(x)
    y = x.copy()
    top = diff = 0.0
    for _ in range(iters):
        Hx = hodlr_apply(H, x)
        top = max(top, float(np.linalg.norm(Hx)))
        x = Hx / max(np.linalg.norm(Hx), 1e-300)
        R = F.apply_w(F.apply_wt(y)) - hodlr_apply(H, y)
        nr = float(np.linalg.norm(R))
        diff = max(diff, nr)
        if nr == 0.0:
            break
        y = R / nr
    return diff / top if top > 0 else 0.0


def factorize_spd(H: HodlrMatrix, factor_tol: float = 1e-10, check: bool = True) -> HodlrFactorization:
    """Symmetric factor ``W`` with ``W W^T = H`` for SPD ``H``.

    Raises
    ------
    NotSPDError
        A leaf is not positive definite or an update core has a
        non-positive eigenvalue; either means ``H`` is not SPD.
    ArithmeticError
        The measured residual exceeds ``factor_tol``.
    """
    p = H.partition
    leaf_chol = []
    for i, D in enumerate(H.leaves):
        try:
            leaf_chol.append(la.cholesky((D + D.T) / 2, lower=True))
        except la.LinAlgError as exc:
            raise NotSPDError(f"leaf {i} is not positive definite") from exc
    leaf_chol = tuple(leaf_chol)
    done = []  # update levels, finest first
    for level in range(p.depth, 0, -1):
        facs = H.factors[level - 1]
        pairs = p.pairs(level)
        k = max((f.rank for f in facs), default=0)
        X = np.zeros((p.n, k))
        for ((a, b), (_, c)), f in zip(pairs, facs):
            X[a:b, : f.rank] = f.U
            X[b:c, : f.rank] = f.V
        _partial_inverse(leaf_chol, done, p, X)
        ups = []
        for j, (((a, b), (_, c)), f) in enumerate(zip(pairs, facs)):
            r = f.rank
            if r == 0:
                ups.append(_PairUpdate(a, b, c, np.zeros((b - a, 0)), np.zeros((c - b, 0)),
                                       np.zeros((0, 0)), np.zeros((0, 0))))
                continue
            Q1, _ = orthog(X[a:b, :r])
            Q2, _ = orthog(X[b:c, :r])
            R1 = Q1.T @ X[a:b, :r]
            R2 = Q2.T @ X[b:c, :r]
            off = (R1 * f.sigma) @ R2.T
            M = np.eye(2 * r)
            M[:r, r:] += off
            M[r:, :r] += off.T
            mu, E = sym_eig(M, rtol=1e-8)
            if mu[0] <= 0:
                raise NotSPDError(f"level {level} pair {j}: update core has eigenvalue {mu[0]:.3e} <= 0")
            T = (E * (np.sqrt(mu) - 1.0)) @ E.T
            Tinv = (E * (1.0 / np.sqrt(mu) - 1.0)) @ E.T
            ups.append(_PairUpdate(a, b, c, Q1, Q2, T, Tinv))
        done.append(tuple(ups))
    levels = tuple(reversed(done))  # levels[l - 1] is G_l
    F = HodlrFactorization(H, leaf_chol, levels, float("nan"))
    if check:
        res = factor_residual(F)
        if not res <= factor_tol:
            raise ArithmeticError(f"factor residual {res:.3e} exceeds factor_tol {factor_tol:.1e}")
        F = HodlrFactorization(H, leaf_chol, levels, res)
    return F


def solve(F: HodlrFactorization, b, flops: FlopCounter | None = None):
    """``H^{-1} b = W^{-T} W^{-1} b``."""
    return F.apply_winvt(F.apply_winv(b, flops), flops)


def sqrt_apply(F: HodlrFactorization, z, flops: FlopCounter | None = None):
    """``W z``; ``W`` is a (non-symmetric) square-root factor, ``W W^T = H``."""
    return F.apply_w(z, flops)


def inv_sqrt_apply(F: HodlrFactorization, z, transpose: bool = False,
                   flops: FlopCounter | None = None):
    """``W^{-1} z``, or ``W^{-T} z`` with ``transpose=True``.

    ``W^{-T} z`` for standard normal ``z`` has covariance ``H^{-1}``, which
    is the form needed for sampling.
    """
    return F.apply_winvt(z, flops) if transpose else F.apply_winv(z, flops)
