"""Recursive bisection of the index set and kd-tree degree-of-freedom ordering."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "HierPartition",
    "Permutation",
    "build_partition",
    "default_depth",
    "kdtree_order",
    "locality_score",
    "read_points",
    "write_permutation",
    "read_permutation",
]


@dataclass(frozen=True)
class HierPartition:
    """Balanced contiguous bisection of ``range(n)`` down to depth ``depth``.

    ``offsets[l]`` holds the ``2**l + 1`` boundaries of the level-``l`` index
    sets (0-based, half open).  Level 0 is the whole set.  When a set has odd
    size the left child gets the extra index.
    """

    n: int
    depth: int
    offsets: tuple[np.ndarray, ...] = field(repr=False)

    def blocks(self, level: int) -> list[tuple[int, int]]:
        o = self.offsets[level]
        return [(int(o[i]), int(o[i + 1])) for i in range(len(o) - 1)]

    def pairs(self, level: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """Sibling pairs ``((a, b), (b, c))`` at ``level >= 1``."""
        b = self.blocks(level)
        return [(b[2 * j], b[2 * j + 1]) for j in range(len(b) // 2)]

    @property
    def leaves(self) -> list[tuple[int, int]]:
        return self.blocks(self.depth)

    @property
    def max_leaf(self) -> int:
        return int(np.max(np.diff(self.offsets[self.depth])))

    def truncated(self, depth: int) -> "HierPartition":
        if not 1 <= depth <= self.depth:
            raise ValueError(f"depth {depth} outside 1..{self.depth}")
        return HierPartition(self.n, depth, self.offsets[: depth + 1])


def build_partition(n: int, depth: int) -> HierPartition:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if n < 2**depth:
        raise ValueError(f"n={n} too small for depth {depth}: need n >= {2**depth}")
    offsets = [np.array([0, n], dtype=np.int64)]
    for _ in range(depth):
        prev = offsets[-1]
        nxt = np.empty(2 * (len(prev) - 1) + 1, dtype=np.int64)
        nxt[0::2] = prev
        sizes = np.diff(prev)
        nxt[1::2] = prev[:-1] + (sizes + 1) // 2
        offsets.append(nxt)
    return HierPartition(n, depth, tuple(offsets))


def default_depth(n: int, leaf_target: int) -> int:
    """Largest ``L >= 1`` with ``leaf_target * 2**L <= n`` (i.e. floor(log2(n/leaf)))."""
    if n < 1 or leaf_target < 1:
        raise ValueError("n and leaf_target must be >= 1")
    L = 0
    while leaf_target * 2 ** (L + 1) <= n:
        L += 1
    return max(1, L)


@dataclass(frozen=True)
class Permutation:
    """Reordering of degrees of freedom.

    ``forward[k]`` is the original index placed at position ``k``, so the
    permuted vector is ``x[forward]`` and the permuted matrix is
    ``A[np.ix_(forward, forward)]``.
    """

    forward: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        f = np.asarray(self.forward, dtype=np.int64)
        if f.ndim != 1 or not np.array_equal(np.sort(f), np.arange(f.size)):
            raise ValueError("forward map is not a bijection on range(n)")
        object.__setattr__(self, "forward", f)

    @property
    def n(self) -> int:
        return int(self.forward.size)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.forward)
        inv[self.forward] = np.arange(self.n)
        return inv

    def apply(self, x):
        """``B x``: move entries into the new order (rows of 2-D inputs)."""
        return np.asarray(x)[self.forward]

    def apply_transpose(self, y):
        """``B^T y``: move entries back to the original order."""
        return np.asarray(y)[self.inverse]

    def conjugate(self, A):
        """``B A B^T`` for a dense matrix."""
        A = np.asarray(A)
        return A[np.ix_(self.forward, self.forward)]

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))


def _split_sizes(n: int) -> int:
    return (n + 1) // 2


def kdtree_order(points, depth: int) -> Permutation:
    """kd-tree ordering by recursive median splits along the widest axis.

    Splits follow the same ceil/floor sizes as :func:`build_partition`, so
    every contiguous block of ``build_partition(n, depth)`` is one side of a
    hyperplane split.  Recursion continues to singletons; ties in the split
    coordinate are broken by original index.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    n = P.shape[0]
    if n < 1 or not np.all(np.isfinite(P)):
        raise ValueError("point cloud must be non-empty and finite")
    if n < 2**depth:
        raise ValueError(f"{n} points too few for depth {depth}")
    if np.all(np.ptp(P, axis=0) == 0):
        warnings.warn("degenerate point cloud: keeping input order", RuntimeWarning, stacklevel=2)
        return Permutation(np.arange(n), degenerate=True)

    order = np.arange(n)
    stack = [(0, n)]
    while stack:
        a, b = stack.pop()
        if b - a < 2:
            continue
        idx = order[a:b]
        sub = P[idx]
        axis = int(np.argmax(np.ptp(sub, axis=0)))
        # lexsort: last key is primary
        local = np.lexsort((idx, sub[:, axis]))
        order[a:b] = idx[local]
        m = a + _split_sizes(b - a)
        stack.append((m, b))
        stack.append((a, m))
    return Permutation(order)


def _mean_cross_distance(X, Y, max_pairs, rng):
    if X.shape[0] * Y.shape[0] <= max_pairs:
        return float(cdist(X, Y).mean())
    i = rng.integers(0, X.shape[0], max_pairs)
    j = rng.integers(0, Y.shape[0], max_pairs)
    return float(np.linalg.norm(X[i] - Y[j], axis=-1).mean())


def locality_score(points, perm: Permutation, partition: HierPartition,
                   max_pairs: int = 2_000_000, seed: int = 0) -> float:
    """Diagnostic for how well an ordering separates sibling blocks in space.

    Mean pairwise distance between the two level-1 sibling blocks divided by
    the mean pairwise distance over all points.  Values near 1 mean the
    ordering carries no spatial information; larger is better.  For more than
    2000 points, distances are averaged over a fixed-seed random pair sample.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] != perm.n or perm.n != partition.n:
        raise ValueError("points, permutation and partition sizes differ")
    Q = P[perm.forward]
    rng = np.random.default_rng(seed)
    pairs = max_pairs if Q.shape[0] > 2000 else Q.shape[0] ** 2
    glob = _mean_cross_distance(Q, Q, pairs, rng)
    if glob == 0.0:
        return 1.0
    ratios = [
        _mean_cross_distance(Q[a:b], Q[c:e], pairs, rng) / glob
        for (a, b), (c, e) in partition.pairs(1)
    ]
    return float(np.mean(ratios))


def read_points(path) -> np.ndarray:
    """Whitespace-delimited point cloud, one point per line."""
    P = np.loadtxt(path, ndmin=2)
    if P.shape[0] < 1 or not np.all(np.isfinite(P)):
        raise ValueError(f"bad point cloud in {path}")
    return P


def write_permutation(path, perm: Permutation) -> None:
    np.savetxt(path, perm.forward + 1, fmt="%d")


def read_permutation(path) -> Permutation:
    return Permutation(np.loadtxt(path, dtype=np.int64, ndmin=1) - 1)
