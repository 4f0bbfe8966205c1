"""Randomized matrix-free compression into low-rank and HODLR form.

Cost is measured in operator applies (columns pushed through the operator).
For fixed ranks ``r_l`` and oversampling ``d`` the peeling compressor uses
exactly::

    zeta = 2 * (<r> + d) * L + ceil(N / 2**L)

applies: two passes of ``r_l + d`` structured probes per level plus one
probe per leaf column.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import HodlrMatrix, LowRankFactor, apply as hodlr_apply
from .dense import RngStream, orthog, small_svd, spectral_norm_estimate
from .partition import HierPartition

__all__ = [
    "CompressionBudget",
    "CompressionReport",
    "CostCurves",
    "CompressionError",
    "zeta",
    "zeta_lr",
    "randomized_svd",
    "lowrank_compress_adaptive",
    "hodlr_compress",
    "hodlr_compress_adaptive",
    "hodlr_error_estimate",
    "estimate_costs",
]

ADAPTIVE_START_RANK = 8
ERROR_PROBES = 10


class CompressionError(RuntimeError):
    pass


def zeta(ranks, d: int, n: int, depth: int) -> int:
    """Apply count of fixed-rank peeling: ``2 (sum r_l + d L) + ceil(n / 2^L)``."""
    ranks = list(ranks)
    if len(ranks) != depth:
        raise ValueError(f"need {depth} level ranks, got {len(ranks)}")
    return 2 * (int(sum(ranks)) + d * depth) + math.ceil(n / 2**depth)


def zeta_lr(r: int, d: int) -> int:
    """Single-pass low-rank apply count ``r + d``."""
    return int(r) + int(d)


@dataclass(frozen=True)
class CompressionBudget:
    """Rank or tolerance budget.

    ``mode="fixed"`` uses ``ranks`` (one per level); ``mode="adaptive"``
    uses the relative tolerance ``tol``.
    """

    ranks: tuple[int, ...] = ()
    oversampling: int = 10
    mode: str = "fixed"
    tol: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.oversampling < 1:
            raise ValueError("oversampling d must be >= 1")
        if any(r < 0 for r in self.ranks):
            raise ValueError("ranks must be >= 0")
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "adaptive" and not (self.tol is not None and 0 < self.tol < 1):
            raise ValueError("adaptive mode needs 0 < tol < 1")

    @classmethod
    def fixed(cls, ranks, d: int = 10) -> "CompressionBudget":
        return cls(tuple(ranks), d, "fixed")

    @classmethod
    def adaptive(cls, tol: float, d: int = 10) -> "CompressionBudget":
        return cls((), d, "adaptive", tol)

    @property
    def mean_rank(self) -> float:
        return float(np.mean(self.ranks)) if self.ranks else 0.0


@dataclass
class CompressionReport:
    applies: int
    seed: int
    mode: str
    level_ranks: list = field(default_factory=list)
    block_ranks: list = field(default_factory=list)
    spectra: list = field(default_factory=list)
    error_estimate: float | None = None
    norm_estimate: float | None = None
    modeled_applies: int | None = None
    dense_blocks: list = field(default_factory=list)
    leaf_asymmetry: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def write_spectra_csv(self, path, header: str | None = None) -> None:
        """Per-block singular values as rows ``level, block, index, sigma``."""
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header.rstrip("\n") + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "block", "index", "sigma"])
            for level, blocks in enumerate(self.spectra, start=1):
                for j, sig in enumerate(blocks):
                    for i, s in enumerate(sig):
                        w.writerow([level, j, i, repr(float(s))])


def _counter(op) -> int:
    return int(getattr(op, "applies", 0))


def _apply(op, X):
    return op.apply(X) if hasattr(op, "apply") else np.asarray(op) @ X


def randomized_svd(op, r: int, d: int, rng: RngStream):
    """Double-pass randomized SVD of a symmetric operator.

    Range finding with ``r + d`` Gaussian probes, a second pass against the
    orthonormal basis, then a small SVD of the triangular factor of the
    second-pass samples.  Uses exactly ``2 (r + d)`` applies.

    Returns
    -------
    factor : LowRankFactor
        ``A ~ U diag(sigma) V^T`` truncated to rank ``r``.
    report : CompressionReport
    """
    n = op.shape[0]
    k = r + d
    if r < 0 or d < 1 or k > n:
        raise ValueError(f"need r >= 0, d >= 1 and r + d <= N, got r={r}, d={d}, N={n}")
    start = _counter(op)
    Omega = rng.normal(n, k)
    Q, _ = orthog(_apply(op, Omega))
    Z = _apply(op, Q)  # A^T Q for symmetric A
    QZ, _ = orthog(Z)
    RZ = QZ.T @ Z
    Vh, s, Uh = small_svd(RZ)  # RZ = Vh diag(s) Uh^T, so A ~ (Q Uh) diag(s) (QZ Vh)^T
    factor = LowRankFactor((Q @ Uh)[:, :r], s[:r], (QZ @ Vh)[:, :r])
    report = CompressionReport(_counter(op) - start, rng.seed, "fixed", [r], [[r]], [[s.tolist()]],
                               modeled_applies=zeta_lr(r, d))
    return factor, report


def lowrank_compress_adaptive(op, tol_rel: float, d: int, rng: RngStream,
                              norm: float | None = None, max_rank: int | None = None):
    """Rank-adaptive double-pass low-rank approximation.

    Grows the sample count ``r + d`` with ``r = 8, 16, 32, ...`` until the
    residual estimate on ``ERROR_PROBES`` fresh probes is below
    ``tol_rel * ||A|| / 2``, then truncates singular values at the same
    threshold.
    """
    if not 0 < tol_rel < 1:
        raise ValueError("need 0 < tol_rel < 1")
    n = op.shape[0]
    start = _counter(op)
    if norm is None:
        norm = spectral_norm_estimate(op, iters=20, rng=rng.split(0))
    tau = tol_rel * norm
    max_rank = n if max_rank is None else max_rank
    samples = rng.split(1)
    Y = np.zeros((n, 0))
    r = ADAPTIVE_START_RANK
    est = np.inf
    while True:
        want = min(r + d, n) - Y.shape[1]
        if want > 0:
            Y = np.hstack([Y, _apply(op, samples.normal(n, want))])
        if Y.shape[1] >= min(n, max_rank):
            est = 0.0
            break
        Q, _ = orthog(Y)
        P = _apply(op, samples.normal(n, ERROR_PROBES))
        E = P - Q @ (Q.T @ P)
        est = float(np.max(np.linalg.norm(E, axis=0)))
        Y = np.hstack([Y, P])
        if est <= tau / 2:
            break
        r *= 2
    Q, _ = orthog(Y[:, : min(Y.shape[1], n)])
    Z = _apply(op, Q)
    QZ, _ = orthog(Z)
    Vh, s, Uh = small_svd(QZ.T @ Z)
    keep = int(np.sum(s > tau / 2))
    factor = LowRankFactor((Q @ Uh)[:, :keep], s[:keep], (QZ @ Vh)[:, :keep])
    tail = float(s[keep]) if keep < s.size else 0.0
    report = CompressionReport(_counter(op) - start, rng.seed, "adaptive", [keep], [[keep]],
                               [[s.tolist()]], error_estimate=(est + tail) / norm if norm else 0.0,
                               norm_estimate=norm, modeled_applies=zeta_lr(keep, d))
    return factor, report


# -- peeling -----------------------------------------------------------------------

def _partial(partition: HierPartition, factors: list) -> HodlrMatrix:
    """HODLR matrix holding the levels captured so far, zero elsewhere."""
    full = []
    for level in range(1, partition.depth + 1):
        if level <= len(factors):
            full.append(tuple(factors[level - 1]))
        else:
            full.append(tuple(LowRankFactor.zeros(b - a, c - b) for (a, b), (_, c) in partition.pairs(level)))
    leaves = tuple(np.zeros((b - a, b - a)) for a, b in partition.leaves)
    return HodlrMatrix(partition, tuple(full), leaves)


def _deflated(op, partition, factors):
    if not factors:
        return lambda X: _apply(op, X)
    H = _partial(partition, factors)
    return lambda X: _apply(op, X) - hodlr_apply(H, X)


def _extract_leaves(op, partition, factors):
    """Leaf blocks from ``max_leaf`` probes, each summing one identity column per leaf."""
    n = partition.n
    leaves = partition.leaves
    m = partition.max_leaf
    P = np.zeros((n, m))
    for a, b in leaves:
        P[a + np.arange(b - a), np.arange(b - a)] = 1.0
    Y = _deflated(op, partition, factors)(P)
    out, asym = [], 0.0
    for a, b in leaves:
        D = Y[a:b, : b - a]
        scale = np.linalg.norm(D)
        if scale > 0:
            asym = max(asym, float(np.linalg.norm(D - D.T) / scale))
        out.append((D + D.T) / 2)
    return tuple(out), asym


def _second_pass(deflate, partition, level, bases, n):
    """Row-space samples ``Z = (A - H_prev) Q_Y`` for all pairs of one level."""
    width = max((Q.shape[1] for Q in bases if Q is not None), default=0)
    if width == 0:
        return None
    QY = np.zeros((n, width))
    for ((a, b), _), Q in zip(partition.pairs(level), bases):
        if Q is not None:
            QY[a:b, : Q.shape[1]] = Q
    return deflate(QY)


def _factor_from_samples(Q, Zj):
    """``B ~ Q Z_j^T`` recompressed through a QR of ``Z_j`` and a small SVD."""
    k = Q.shape[1]
    QZ, _ = orthog(Zj[:, :k])
    Vh, s, Uh = small_svd(QZ.T @ Zj[:, :k])
    return Q @ Uh, s, QZ @ Vh


def hodlr_compress(op, partition: HierPartition, budget: CompressionBudget, rng: RngStream):
    """Fixed-rank symmetric peeling compression.

    Level by level, coarse to fine: probes are nonzero only on the right
    child of every sibling pair, the operator minus all coarser captured
    levels is sampled, a basis for each upper block's column space is
    formed, and a second pass against those bases gives the row space.
    Leaves come last from leaf-local identity probes.  Blocks whose
    ``r + d`` reaches their column count are captured exactly through
    identity probes and flagged in ``report.dense_blocks``.
    """
    if budget.mode != "fixed":
        raise ValueError("hodlr_compress needs a fixed-rank budget; see hodlr_compress_adaptive")
    if op.shape[0] != partition.n:
        raise ValueError(f"operator size {op.shape[0]} != partition size {partition.n}")
    L = partition.depth
    if len(budget.ranks) != L:
        raise ValueError(f"budget has {len(budget.ranks)} ranks for depth {L}")
    n, d = partition.n, budget.oversampling
    start = _counter(op)
    factors, spectra, dense_blocks = [], [], []
    for level in range(1, L + 1):
        r = budget.ranks[level - 1]
        k = r + d
        pairs = partition.pairs(level)
        Omega = np.zeros((n, k))
        exact = []
        for j, ((a, b), (_, c)) in enumerate(pairs):
            cols = c - b
            if k >= cols:
                Omega[b:c, :cols] = np.eye(cols)
                exact.append(True)
                dense_blocks.append([level, j])
            else:
                Omega[b:c] = rng.split(level, j).normal(cols, k)
                exact.append(False)
        deflate = _deflated(op, partition, factors)
        Y = deflate(Omega)
        bases = []
        for ((a, b), (_, c)), ex in zip(pairs, exact):
            bases.append(None if ex else orthog(Y[a:b])[0])
        Z = _second_pass(deflate, partition, level, bases, n)
        if Z is None:  # every block exact; keep the apply count of the formula
            deflate(np.zeros((n, k)))
        facs, sig = [], []
        for ((a, b), (_, c)), ex, Q in zip(pairs, exact, bases):
            if ex:
                U, s, V = small_svd(Y[a:b, : c - b])
                facs.append(LowRankFactor(U, s, V))
            else:
                U, s, V = _factor_from_samples(Q, Z[b:c])
                facs.append(LowRankFactor(U[:, :r], s[:r], V[:, :r]))
            sig.append(s.tolist())
        factors.append(facs)
        spectra.append(sig)
    leaves, asym = _extract_leaves(op, partition, factors)
    H = HodlrMatrix(partition, tuple(tuple(f) for f in factors), leaves)
    report = CompressionReport(
        applies=_counter(op) - start, seed=rng.seed, mode="fixed",
        level_ranks=H.level_ranks(), block_ranks=H.ranks(), spectra=spectra,
        modeled_applies=zeta(budget.ranks, d, n, L), dense_blocks=dense_blocks,
        leaf_asymmetry=asym,
    )
    return H, report


def hodlr_compress_adaptive(op, partition: HierPartition, tol_rel: float, d: int, rng: RngStream,
                            norm: float | None = None):
    """Rank-adaptive peeling compression to relative tolerance ``tol_rel``.

    Every off-diagonal block gets the absolute budget
    ``tau = tol_rel * ||A|| / L``: half for the range-finding residual, half
    for singular-value truncation.  Sample counts per block grow as
    ``r + d`` with ``r = 8, 16, 32, ...``, reusing earlier samples.  After
    each growth step ``ERROR_PROBES`` fresh probes measure the residual
    ``max ||(I - Q Q^T) B w||``; the probes then join the samples.  A block
    whose samples reach its column count is exact (flagged dense).

    ``||A||`` is estimated by 20 power-iteration applies unless ``norm`` is
    given.  ``report.error_estimate`` is the sum over levels of the largest
    block estimate, relative to ``||A||``.
    """
    if not 0 < tol_rel < 1:
        raise ValueError("need 0 < tol_rel < 1")
    if d < 1:
        raise ValueError("oversampling d must be >= 1")
    if op.shape[0] != partition.n:
        raise ValueError(f"operator size {op.shape[0]} != partition size {partition.n}")
    n, L = partition.n, partition.depth
    start = _counter(op)
    if norm is None:
        norm = spectral_norm_estimate(op, iters=20, rng=rng.split(0))
    tau = tol_rel * norm / L
    factors, spectra, dense_blocks, level_err = [], [], [], []
    for level in range(1, L + 1):
        pairs = partition.pairs(level)
        nb = len(pairs)
        streams = [rng.split(level, j) for j in range(nb)]
        cols = [c - b for (_, b), (_, c) in pairs]
        Ys = [np.zeros((b - a, 0)) for (a, b), _ in pairs]
        done = [False] * nb
        est = [np.inf] * nb
        deflate = _deflated(op, partition, factors)
        r = ADAPTIVE_START_RANK
        while not all(done):
            # new samples up to r + d, plus ERROR_PROBES fresh probes, in one batch
            new = [0 if done[j] else max(0, min(r + d, cols[j]) - Ys[j].shape[1]) for j in range(nb)]
            probes = [0 if done[j] or Ys[j].shape[1] + new[j] >= cols[j] else ERROR_PROBES
                      for j in range(nb)]
            width = max(nw + p for nw, p in zip(new, probes))
            if width == 0:
                break
            Omega = np.zeros((n, width))
            for j, ((a, b), (_, c)) in enumerate(pairs):
                m = new[j] + probes[j]
                if m:
                    Omega[b:c, :m] = streams[j].normal(c - b, m)
            Y = deflate(Omega)
            for j, ((a, b), _) in enumerate(pairs):
                if done[j]:
                    continue
                Ys[j] = np.hstack([Ys[j], Y[a:b, : new[j]]])
                if Ys[j].shape[1] >= cols[j]:
                    done[j], est[j] = True, 0.0
                    dense_blocks.append([level, j])
                    continue
                Q, _ = orthog(Ys[j])
                P = Y[a:b, new[j]: new[j] + probes[j]]
                E = P - Q @ (Q.T @ P)
                est[j] = float(np.max(np.linalg.norm(E, axis=0)))
                Ys[j] = np.hstack([Ys[j], P])
                if Ys[j].shape[1] >= cols[j]:  # probes completed the column space
                    done[j], est[j] = True, 0.0
                    dense_blocks.append([level, j])
                elif est[j] <= tau / 2:
                    done[j] = True
            r *= 2
        bases = []
        for j in range(nb):
            k = min(Ys[j].shape[1], cols[j])
            bases.append(orthog(Ys[j][:, :k] if k < Ys[j].shape[1] else Ys[j])[0] if k else None)
        Z = _second_pass(deflate, partition, level, bases, n)
        facs, sig, errs = [], [], []
        for j, (((a, b), (_, c)), Q) in enumerate(zip(pairs, bases)):
            if Q is None:
                facs.append(LowRankFactor.zeros(b - a, c - b))
                sig.append([])
                errs.append(0.0)
                continue
            U, s, V = _factor_from_samples(Q, Z[b:c])
            keep = int(np.sum(s > tau / 2))
            facs.append(LowRankFactor(U[:, :keep], s[:keep], V[:, :keep]))
            sig.append(s.tolist())
            errs.append(est[j] + (float(s[keep]) if keep < s.size else 0.0))
        factors.append(facs)
        spectra.append(sig)
        level_err.append(max(errs))
    leaves, asym = _extract_leaves(op, partition, factors)
    H = HodlrMatrix(partition, tuple(tuple(f) for f in factors), leaves)
    report = CompressionReport(
        applies=_counter(op) - start, seed=rng.seed, mode="adaptive",
        level_ranks=H.level_ranks(), block_ranks=H.ranks(), spectra=spectra,
        error_estimate=float(sum(level_err) / norm) if norm > 0 else 0.0,
        norm_estimate=float(norm), modeled_applies=zeta(H.level_ranks(), d, n, L),
        dense_blocks=dense_blocks, leaf_asymmetry=asym,
    )
    return H, report


def _block_power(matmat, n, probes, iters, rng):
    X, _ = orthog(rng.normal(n, probes))
    est = 0.0
    for _ in range(iters):
        Y = matmat(X)
        s = np.linalg.svd(Y, compute_uv=False)
        est = max(est, float(s[0]))
        if s[0] == 0.0:
            return 0.0
        X, _ = orthog(Y)
    return est


def hodlr_error_estimate(op, H: HodlrMatrix, probes: int = 4, rng: RngStream | None = None,
                         iters: int = 20) -> float:
    """Relative spectral error ``||A - H|| / ||A||`` by block power iteration.

    Both norms use ``iters`` steps of subspace iteration on ``probes``
    columns, so each is a lower estimate that tightens with ``iters``.
    Costs ``2 * iters * probes`` applies.
    """
    if probes < 2:
        raise ValueError("need at least 2 probes")
    rng = rng if rng is not None else RngStream(0)
    n = op.shape[0]
    top = _block_power(lambda X: _apply(op, X), n, probes, iters, rng.split(0))
    if top == 0.0:
        return 0.0
    diff = _block_power(lambda X: _apply(op, X) - hodlr_apply(H, X), n, probes, iters, rng.split(1))
    return diff / top


# -- cost model ----------------------------------------------------------------------

@dataclass
class CostCurves:
    errors: list
    lr_rank: list
    lr_cost: list
    lr_unreachable: list
    hodlr_ranks: list
    hodlr_cost: list
    hodlr_unreachable: list

    def rows(self):
        for i, e in enumerate(self.errors):
            yield {
                "error": e, "lr_rank": self.lr_rank[i], "lr_applies_modeled": self.lr_cost[i],
                "lr_unreachable": int(self.lr_unreachable[i]),
                "hodlr_ranks": " ".join(str(r) for r in self.hodlr_ranks[i]),
                "hodlr_applies_modeled": self.hodlr_cost[i],
                "hodlr_unreachable": int(self.hodlr_unreachable[i]),
            }


def _count_above(sigma: np.ndarray, thr: float) -> tuple[int, bool]:
    k = int(np.sum(sigma > thr))
    return k, k == sigma.size and sigma.size > 0


def _check_sorted(s, what):
    s = np.asarray(s, dtype=float).reshape(-1)
    if np.any(~np.isfinite(s)) or np.any(np.diff(s) > 1e-12 * max(float(np.max(s, initial=0.0)), 1e-300)):
        raise ValueError(f"{what}: singular values must be finite and non-increasing")
    return s


def estimate_costs(global_sigma, block_sigma_per_level, n: int, depth: int, d: int,
                   error_grid, norm: float | None = None) -> CostCurves:
    """Modeled apply counts for LR and HODLR compression over an error grid.

    For a target relative error ``e`` with reference ``norm`` (default the
    largest global singular value):

    * LR rank: smallest ``r`` with ``sigma_{r+1} <= e * norm``; cost ``r + d``.
    * HODLR: per level, the largest over blocks of the smallest ``r`` with
      block ``sigma_{r+1} <= e * norm / L``; cost :func:`zeta`.

    A point is flagged unreachable when the supplied list has no value at or
    below the threshold, i.e. the needed rank exceeds the listed spectrum.
    """
    g = _check_sorted(global_sigma, "global spectrum")
    if len(block_sigma_per_level) != depth:
        raise ValueError(f"need block spectra for {depth} levels, got {len(block_sigma_per_level)}")
    levels = []
    for lv, blocks in enumerate(block_sigma_per_level, start=1):
        if len(blocks) and np.ndim(blocks[0]) == 0:
            blocks = [blocks]
        levels.append([_check_sorted(b, f"level {lv} block spectrum") for b in blocks])
    ref = float(norm) if norm is not None else (float(g[0]) if g.size else 0.0)
    out = CostCurves([], [], [], [], [], [], [])
    for e in error_grid:
        e = float(e)
        r, bad = _count_above(g, e * ref)
        out.errors.append(e)
        out.lr_rank.append(r)
        out.lr_cost.append(zeta_lr(r, d))
        out.lr_unreachable.append(bad)
        ranks, hbad = [], False
        for blocks in levels:
            rl = 0
            for b in blocks:
                k, kb = _count_above(b, e * ref / depth)
                rl, hbad = max(rl, k), hbad or kb
            ranks.append(rl)
        out.hodlr_ranks.append(ranks)
        out.hodlr_cost.append(zeta(ranks, d, n, depth))
        out.hodlr_unreachable.append(hbad)
    return out
