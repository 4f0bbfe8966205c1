"""Benchmark studies on the toy operator: aspect ratio, problem dimensions, ordering.

Each study returns CSV-ready rows plus a list of :class:`Claim` objects, the
directional statements the study is meant to reproduce.  Modeled apply
counts come from dense spectra through :func:`estimate_costs`; measured
counts are operator counter deltas of actual adaptive compressions and are
kept in separate columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import estimate_costs, hodlr_compress_adaptive, lowrank_compress_adaptive
from .dense import RngStream, spectral_norm_estimate
from .operators import DEFAULT_WIDTH, toy_misfit_hessian, toy_misfit_hessian_2d
from .partition import Permutation, build_partition, default_depth, kdtree_order, locality_score

__all__ = [
    "Claim",
    "dense_spectra",
    "bench_aspect",
    "bench_dims",
    "bench_order",
    "DEFAULT_ERRORS",
]

DEFAULT_ERRORS = tuple(10.0 ** np.arange(-8, -1.5, 0.5))
BENCH_OVERSAMPLING = 4
BENCH_LEAF = 32


@dataclass
class Claim:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


def dense_spectra(A, depth: int):
    """Global eigenvalue magnitudes (descending) and per-level block singular values."""
    n = A.shape[0]
    g = np.sort(np.abs(np.linalg.eigvalsh((A + A.T) / 2)))[::-1]
    p = build_partition(n, depth)
    levels = []
    for level in range(1, depth + 1):
        levels.append([np.linalg.svd(A[a:b, b:c], compute_uv=False) for (a, b), (_, c) in p.pairs(level)])
    return g, levels, p


def _point(op_factory, n, depth, d, errors, measure, seed, tag):
    """Modeled and (optionally) measured costs for one operator."""
    op = op_factory()
    A = op.dense()
    g, levels, part = dense_spectra(A, depth)
    curves = estimate_costs(g, levels, n, depth, d, errors)
    rows = []
    for i, row in enumerate(curves.rows()):
        row = dict(tag, n=n, depth=depth, d=d, **row)
        if measure:
            e = errors[i]
            rng = RngStream(seed, (i,))
            lr_op = op_factory()
            norm = spectral_norm_estimate(lr_op, iters=20, rng=rng.split(9))
            lr_op.applies = 0
            _, rep_lr = lowrank_compress_adaptive(lr_op, e, d, rng.split(1), norm=norm)
            h_op = op_factory()
            _, rep_h = hodlr_compress_adaptive(h_op, part, e, d, rng.split(2), norm=norm)
            row["lr_applies_measured"] = rep_lr.applies
            row["hodlr_applies_measured"] = rep_h.applies
            if rep_lr.applies != lr_op.applies or rep_h.applies != h_op.applies:
                raise AssertionError("report apply count differs from operator counter")
        rows.append(row)
    return rows, curves


def _at(curves, error):
    i = int(np.argmin(np.abs(np.log10(curves.errors) - np.log10(error))))
    if not np.isclose(curves.errors[i], error, rtol=1e-9):
        raise ValueError(f"error {error} not on the grid")
    return i


def bench_aspect(n: int = 512, width: float = DEFAULT_WIDTH, ratios=(1 / 200, 1 / 100, 1 / 50, 1 / 25),
                 n_obs: int = 100, d: int = BENCH_OVERSAMPLING, leaf_target: int = BENCH_LEAF,
                 errors=DEFAULT_ERRORS, measure: bool = True, seed: int = 0):
    """LR vs HODLR cost of the misfit Hessian as the smoothing thickness varies."""
    depth = default_depth(n, leaf_target)
    rows, curves = [], {}
    for phi in ratios:
        r, c = _point(lambda: toy_misfit_hessian(n, width, phi * width, n_obs), n, depth, d,
                      list(errors), measure, seed, {"h_over_w": phi})
        rows += r
        curves[phi] = c
    small, large = min(ratios), max(ratios)
    claims = []
    i4 = _at(curves[small], 1e-4)
    lr, ho = curves[small].lr_cost[i4], curves[small].hodlr_cost[i4]
    claims.append(Claim("thin: HODLR < LR at 1e-4", ho < lr, f"h/W={small:g}: HODLR {ho}, LR {lr}"))
    for e in (1e-4, 1e-6):
        i = _at(curves[large], e)
        lr, ho = curves[large].lr_cost[i], curves[large].hodlr_cost[i]
        claims.append(Claim(f"thick: LR <= HODLR at {e:g}", lr <= ho, f"h/W={large:g}: LR {lr}, HODLR {ho}"))
    order = sorted(ratios, reverse=True)  # decreasing h
    bad = []
    for i, e in enumerate(curves[small].errors):
        seq = [curves[phi].lr_cost[i] for phi in order]
        if any(b < a for a, b in zip(seq, seq[1:])):
            bad.append(f"{e:g}: {seq}")
    claims.append(Claim("LR cost non-decreasing as h decreases", not bad, "; ".join(bad) or "all errors"))
    return rows, claims


def bench_dims(n_grid=(128, 256, 512), nobs_grid=(100, 150, 200), width: float = DEFAULT_WIDTH,
               thickness: float | None = None, base_n_obs: int = 100, n_for_obs: int = 512,
               d: int = BENCH_OVERSAMPLING, leaf_target: int = BENCH_LEAF, errors=DEFAULT_ERRORS,
               measure: bool = True, seed: int = 0, error: float = 1e-4):
    """Cost vs parameter dimension (depth grows per doubling) and vs observation count."""
    h = width / 100 if thickness is None else thickness
    rows, by_n, by_obs = [], {}, {}
    for n in n_grid:
        depth = default_depth(n, leaf_target)
        r, c = _point(lambda: toy_misfit_hessian(n, width, h, base_n_obs), n, depth, d, list(errors),
                      measure, seed, {"study": "dims", "n_obs": base_n_obs})
        rows += r
        by_n[n] = c
    depth = default_depth(n_for_obs, leaf_target)
    for m in nobs_grid:
        r, c = _point(lambda: toy_misfit_hessian(n_for_obs, width, h, m), n_for_obs, depth, d,
                      list(errors), measure, seed, {"study": "obs", "n_obs": m})
        rows += r
        by_obs[m] = c
    claims = []
    lr = [by_n[n].lr_cost[_at(by_n[n], error)] for n in n_grid]
    claims.append(Claim(f"LR spread <= d+2 across N at {error:g}", max(lr) - min(lr) <= d + 2, f"LR {lr}"))
    ho = [by_n[n].hodlr_cost[_at(by_n[n], error)] for n in n_grid]
    claims.append(Claim(f"HODLR strictly increasing in N at {error:g}",
                        all(b > a for a, b in zip(ho, ho[1:])), f"HODLR {ho}"))
    lo = [by_obs[m].lr_cost[_at(by_obs[m], error)] for m in nobs_grid]
    claims.append(Claim(f"LR strictly increasing in n_obs at {error:g}",
                        all(b > a for a, b in zip(lo, lo[1:])), f"LR {lo}"))
    return rows, claims


def bench_order(nx: int = 16, ny: int = 16, width: float = DEFAULT_WIDTH, thickness: float | None = None,
                obs_stride: int = 2, seed: int = 0, points=None, orderings=("shuffled", "kd")):
    """Level-1 off-diagonal spectra of the 2-D toy under different orderings.

    ``shuffled`` is a seeded random permutation, ``natural`` the row-major
    grid order, ``kd`` the kd-tree order of the grid coordinates (or of
    ``points`` when supplied).
    """
    h = width / nx if thickness is None else thickness
    op, grid = toy_misfit_hessian_2d(nx, ny, width, h, obs_stride)
    pts = grid if points is None else np.asarray(points, dtype=float)
    if pts.shape[0] != op.n:
        raise ValueError(f"point cloud has {pts.shape[0]} points, operator has {op.n}")
    A = op.dense()
    part = build_partition(op.n, 1)
    perms = {}
    for name in orderings:
        if name == "shuffled":
            perms[name] = Permutation(np.random.default_rng(seed).permutation(op.n))
        elif name == "natural":
            perms[name] = Permutation.identity(op.n)
        elif name == "kd":
            perms[name] = kdtree_order(pts, 1)
        else:
            raise ValueError(f"unknown ordering {name!r}")
    sig, score = {}, {}
    for name, perm in perms.items():
        Ap = perm.conjugate(A)
        (a, b), (_, c) = part.pairs(1)[0]
        sig[name] = np.linalg.svd(Ap[a:b, b:c], compute_uv=False)
        score[name] = locality_score(pts, perm, part)
    rows = []
    for j in range(len(next(iter(sig.values())))):
        rows.append({"index": j + 1, **{f"sigma_{k}": float(v[j]) for k, v in sig.items()}})
    claims = []
    if "kd" in sig and "shuffled" in sig:
        kd, sh = sig["kd"], sig["shuffled"]
        slack = 1e-12 * max(kd[0], sh[0])
        bad = [j + 1 for j in range(4, kd.size) if kd[j] > sh[j] + slack]
        claims.append(Claim("kd sigma_j <= shuffled sigma_j for j >= 5", not bad,
                            f"violations at {bad[:10]}" if bad else f"{kd.size - 4} indices checked"))
        claims.append(Claim("kd locality score > shuffled", score["kd"] > score["shuffled"],
                            f"kd {score['kd']:.4f}, shuffled {score['shuffled']:.4f}"))
    return rows, claims, score
