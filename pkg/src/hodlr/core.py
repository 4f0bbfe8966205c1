"""Symmetric HODLR matrices: storage, apply, densification and serialization.

Layout
------
A depth-``L`` HODLR matrix over a :class:`~hodlr.partition.HierPartition`
stores, for every level ``l = 1..L`` and every sibling pair ``(I_{2j-1},
I_{2j})`` at that level, one factor ``U diag(sigma) V^T`` for the upper block
``A[I_{2j-1}, I_{2j}]``; the lower block is its transpose.  The ``2**L``
diagonal leaf blocks are stored dense and full.

The exact number of stored reals is therefore::

    sum over leaves i of  n_i**2
  + sum over levels l, pairs j of  (m_lj + n_lj) * k_lj + k_lj

with ``m_lj, n_lj`` the pair's block sizes and ``k_lj`` its rank.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dense import SMALL_MATRIX_CAP, RngStream, orthog, small_svd
from .partition import HierPartition, build_partition

__all__ = [
    "FlopCounter",
    "LowRankFactor",
    "HodlrMatrix",
    "apply",
    "densify",
    "storage_count",
    "frob_norm",
    "add_scaled_identity",
    "truncate_dense",
    "random_hodlr",
    "save",
    "load",
]

MAGIC = b"HODLR1\n"


class FlopCounter:
    """Accumulates multiply-add counts reported by the kernels that accept one."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def _tick(flops, n):
    if flops is not None:
        flops.add(n)


@dataclass(frozen=True)
class LowRankFactor:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        V = np.asarray(self.V, dtype=float)
        s = np.asarray(self.sigma, dtype=float).reshape(-1)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != s.size or V.shape[1] != s.size:
            raise ValueError(f"inconsistent factor shapes U{U.shape} sigma{s.shape} V{V.shape}")
        if np.any(s < 0):
            raise ValueError("singular values must be non-negative")
        if s.size > 1 and np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)):
            raise ValueError("singular values must be non-increasing")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "sigma", s)

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    def dense(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    def truncate(self, rank: int) -> "LowRankFactor":
        return LowRankFactor(self.U[:, :rank], self.sigma[:rank], self.V[:, :rank])

    @classmethod
    def zeros(cls, m: int, n: int) -> "LowRankFactor":
        return cls(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))


@dataclass(frozen=True)
class HodlrMatrix:
    partition: HierPartition
    factors: tuple[tuple[LowRankFactor, ...], ...]
    leaves: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        p = self.partition
        if len(self.factors) != p.depth:
            raise ValueError(f"expected {p.depth} levels of factors, got {len(self.factors)}")
        for level, facs in enumerate(self.factors, start=1):
            pairs = p.pairs(level)
            if len(facs) != len(pairs):
                raise ValueError(f"level {level}: expected {len(pairs)} factors, got {len(facs)}")
            for ((a, b), (_, c)), f in zip(pairs, facs):
                if f.shape != (b - a, c - b):
                    raise ValueError(f"level {level}: factor shape {f.shape} != {(b - a, c - b)}")
        if len(self.leaves) != 2**p.depth:
            raise ValueError("wrong number of leaf blocks")
        leaves = []
        for (a, b), D in zip(p.leaves, self.leaves):
            D = np.asarray(D, dtype=float)
            if D.shape != (b - a, b - a):
                raise ValueError(f"leaf shape {D.shape} != {(b - a, b - a)}")
            leaves.append(D)
        object.__setattr__(self, "leaves", tuple(leaves))
        object.__setattr__(self, "factors", tuple(tuple(f) for f in self.factors))

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def shape(self) -> tuple[int, int]:
        return self.n, self.n

    @property
    def depth(self) -> int:
        return self.partition.depth

    def ranks(self) -> list[list[int]]:
        return [[f.rank for f in facs] for facs in self.factors]

    def level_ranks(self) -> list[int]:
        return [max((f.rank for f in facs), default=0) for facs in self.factors]

    def apply(self, X, flops: FlopCounter | None = None):
        return apply(self, X, flops)

    def __matmul__(self, X):
        return apply(self, X)


def _as_cols(X, n):
    X = np.asarray(X, dtype=float)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != n:
        raise ValueError(f"expected {n} rows, got shape {X.shape}")
    return X, vec


def apply(H: HodlrMatrix, X, flops: FlopCounter | None = None):
    """``H @ X`` in O((N log N + N * leaf) * cols) work.

    Blocks are visited in a fixed order so the result is bitwise
    reproducible.
    """
    X, vec = _as_cols(X, H.n)
    m = X.shape[1]
    Y = np.zeros_like(X)
    for (a, b), D in zip(H.partition.leaves, H.leaves):
        Y[a:b] = D @ X[a:b]
        _tick(flops, (b - a) ** 2 * m)
    for level, facs in enumerate(H.factors, start=1):
        for ((a, b), (_, c)), f in zip(H.partition.pairs(level), facs):
            k = f.rank
            if k == 0:
                continue
            s = f.sigma[:, None]
            Y[a:b] += f.U @ (s * (f.V.T @ X[b:c]))
            Y[b:c] += f.V @ (s * (f.U.T @ X[a:b]))
            _tick(flops, 2 * ((b - a) + (c - b) + 1) * k * m)
    return Y[:, 0] if vec else Y


def densify(H: HodlrMatrix, cap: int = SMALL_MATRIX_CAP) -> np.ndarray:
    if H.n > cap:
        raise ValueError(f"N={H.n} exceeds small-matrix cap {cap}")
    A = np.zeros((H.n, H.n))
    for (a, b), D in zip(H.partition.leaves, H.leaves):
        A[a:b, a:b] = D
    for level, facs in enumerate(H.factors, start=1):
        for ((a, b), (_, c)), f in zip(H.partition.pairs(level), facs):
            B = f.dense()
            A[a:b, b:c] = B
            A[b:c, a:b] = B.T
    return A


def storage_count(H: HodlrMatrix) -> int:
    total = sum(D.size for D in H.leaves)
    for facs in H.factors:
        for f in facs:
            m, n = f.shape
            total += (m + n) * f.rank + f.rank
    return int(total)


def frob_norm(H: HodlrMatrix) -> float:
    """Frobenius norm from the factors; U and V need not be orthonormal."""
    sq = sum(float(np.sum(D * D)) for D in H.leaves)
    for facs in H.factors:
        for f in facs:
            if f.rank:
                G = (f.U.T @ f.U) * np.outer(f.sigma, f.sigma) * (f.V.T @ f.V)
                sq += 2.0 * float(np.sum(G))
    return float(np.sqrt(max(sq, 0.0)))


def add_scaled_identity(H: HodlrMatrix, c: float) -> HodlrMatrix:
    leaves = tuple(D + c * np.eye(D.shape[0]) for D in H.leaves)
    return HodlrMatrix(H.partition, H.factors, leaves)


def truncate_dense(A, partition: HierPartition, tol: float | None = None,
                   rank: int | None = None) -> HodlrMatrix:
    """HODLR approximation of a dense symmetric matrix by blockwise SVD.

    Each upper off-diagonal block keeps its singular values above the
    absolute threshold ``tol`` (spectral block error <= tol) and/or at most
    ``rank`` of them.  Leaves are copied exactly.  With neither limit the
    result reproduces ``A`` to rounding.
    """
    A = np.asarray(A, dtype=float)
    factors = []
    for level in range(1, partition.depth + 1):
        facs = []
        for (a, b), (_, c) in partition.pairs(level):
            U, s, V = small_svd(A[a:b, b:c])
            keep = s.size
            if tol is not None:
                keep = int(np.sum(s > tol))
            if rank is not None:
                keep = min(keep, rank)
            facs.append(LowRankFactor(U[:, :keep], s[:keep], V[:, :keep]))
        factors.append(tuple(facs))
    leaves = tuple(A[a:b, a:b].copy() for a, b in partition.leaves)
    return HodlrMatrix(partition, tuple(factors), leaves)


def random_hodlr(partition: HierPartition, ranks, rng: RngStream, decay: float = 0.5,
                 leaf_scale: float = 1.0) -> HodlrMatrix:
    """Random symmetric HODLR matrix with given per-level (or per-block) ranks.

    ``ranks`` is either one rank per level or, per level, one rank per pair.
    Block singular values decay geometrically by ``decay`` starting at 1.
    """
    factors = []
    for level in range(1, partition.depth + 1):
        facs = []
        lr = ranks[level - 1]
        for j, ((a, b), (_, c)) in enumerate(partition.pairs(level)):
            k = int(lr[j] if np.ndim(lr) else lr)
            k = min(k, b - a, c - b)
            sub = rng.split(level, j)
            U, _ = orthog(sub.normal(b - a, k)) if k else (np.zeros((b - a, 0)), 0)
            V, _ = orthog(sub.normal(c - b, k)) if k else (np.zeros((c - b, 0)), 0)
            s = decay ** np.arange(k)
            facs.append(LowRankFactor(U, s, V))
        factors.append(tuple(facs))
    leaves = []
    for i, (a, b) in enumerate(partition.leaves):
        G = rng.split(partition.depth + 1, i).normal(b - a, b - a)
        leaves.append(leaf_scale * (G + G.T) / 2)
    return HodlrMatrix(partition, tuple(factors), tuple(leaves))


# -- serialization -------------------------------------------------------------

def save(path, H: HodlrMatrix) -> None:
    """Write ``H`` as ``HODLR1`` magic, header length, JSON header, float64 data."""
    chunks = []
    blocks = []
    offset = 0

    def put(arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(a.tobytes())
        start = offset
        offset += a.nbytes
        return start

    for level, facs in enumerate(H.factors, start=1):
        for j, f in enumerate(facs):
            m, n = f.shape
            blocks.append({
                "level": level, "pair": j, "rows": m, "cols": n, "rank": f.rank,
                "U": put(f.U), "sigma": put(f.sigma), "V": put(f.V),
            })
    leaves = [{"index": i, "size": D.shape[0], "offset": put(D)} for i, D in enumerate(H.leaves)]
    header = {
        "format": "HODLR1",
        "n": H.n,
        "depth": H.depth,
        "leaf_size": H.partition.max_leaf,
        "dtype": "<f8",
        "order": "C",
        "offsets": [o.tolist() for o in H.partition.offsets],
        "blocks": blocks,
        "leaves": leaves,
        "data_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load(path) -> HodlrMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a HODLR1 container")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    data = np.frombuffer(raw, dtype="<f8", offset=pos + hlen)
    if data.nbytes != header["data_bytes"]:
        raise ValueError(f"{path}: truncated data section")

    def get(off, shape):
        start = off // 8
        count = int(np.prod(shape))
        return data[start:start + count].reshape(shape).astype(float)

    partition = build_partition(header["n"], header["depth"])
    if [o.tolist() for o in partition.offsets] != header["offsets"]:
        raise ValueError(f"{path}: partition offsets do not match a balanced bisection")
    factors = [[None] * len(partition.pairs(lv)) for lv in range(1, partition.depth + 1)]
    for blk in header["blocks"]:
        m, n, k = blk["rows"], blk["cols"], blk["rank"]
        f = LowRankFactor(get(blk["U"], (m, k)), get(blk["sigma"], (k,)), get(blk["V"], (n, k)))
        factors[blk["level"] - 1][blk["pair"]] = f
    leaves = [get(lf["offset"], (lf["size"], lf["size"])) for lf in header["leaves"]]
    return HodlrMatrix(partition, tuple(tuple(f) for f in factors), tuple(leaves))
