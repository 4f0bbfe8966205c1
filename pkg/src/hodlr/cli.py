"""Command-line entry point.

Every verb reads one JSON config and writes into ``--out`` (default: the
config's ``out`` key, else the current directory).  CSV outputs start with
a ``# config_sha256=... seed=...`` provenance line.

Exit codes: 0 success, 1 config error, 2 numerical failure, 3 a bench claim
failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.linalg as la

from . import bench
from .compression import (CompressionBudget, CompressionError, estimate_costs, hodlr_compress,
                          hodlr_compress_adaptive, hodlr_error_estimate, zeta)
from .core import save
from .dense import RngStream
from .factorization import NotSPDError
from .operators import ConvergenceError, dense_operator, map_estimate, operator_from_config, toy_problem
from .partition import build_partition, default_depth, read_points
from .posterior import build_posterior, pointwise_std, sample, write_envelope_csv

log = logging.getLogger("hodlr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CLAIM = 0, 1, 2, 3


class ConfigError(Exception):
    pass


NUMERIC_ERRORS = (NotSPDError, ConvergenceError, CompressionError, ArithmeticError,
                  np.linalg.LinAlgError, la.LinAlgError)


# -- helpers ---------------------------------------------------------------------------

class Run:
    """Resolved config plus provenance for one invocation."""

    def __init__(self, cfg: dict, seed: int, out: Path, base: Path):
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.base = base
        canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
        self.sha = hashlib.sha256(canon.encode()).hexdigest()

    @property
    def header(self) -> str:
        return f"# config_sha256={self.sha} seed={self.seed}"

    def path(self, name: str) -> Path:
        return self.out / name

    def write_csv(self, name: str, rows: list[dict]) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            fh.write(self.header + "\n")
            if rows:
                cols = list(rows[0])
                for r in rows[1:]:
                    cols += [k for k in r if k not in cols]
                w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: _fmt(v) for k, v in r.items()})
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        payload = {"config_sha256": self.sha, "seed": self.seed, **obj}
        with open(p, "w") as fh:
            fh.write(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def _claims_exit(run: Run, claims) -> int:
    run.write_json("claims.json", {"claims": [c.to_dict() for c in claims]})
    for c in claims:
        log.info("%s %s (%s)", "PASS" if c.passed else "FAIL", c.name, c.detail)
    return EXIT_OK if all(c.passed for c in claims) else EXIT_CLAIM


def _partition(cfg: dict, n: int):
    pcfg = cfg.get("partition", {})
    if "depth" in pcfg:
        return build_partition(n, int(pcfg["depth"]))
    return build_partition(n, default_depth(n, int(pcfg.get("leaf_target", 32))))


def _problem(cfg: dict, seed: int):
    p = cfg.get("problem", {})
    n = int(p.get("n", 512))
    width = float(p.get("width", 1e4))
    return toy_problem(n=n, width=width, thickness=float(p.get("thickness", width / 100)),
                       n_obs=int(p.get("n_obs", min(100, n))), rel_noise=float(p.get("noise", 0.01)),
                       seed=seed, gamma=float(p.get("gamma", 6.0e2)), delta=float(p.get("delta", 2.4e-3)))


# -- verbs -----------------------------------------------------------------------------

def cmd_compress(run: Run) -> int:
    cfg = run.cfg
    if "operator" not in cfg:
        raise ConfigError("config needs an 'operator' section")
    try:
        op = operator_from_config(cfg["operator"], run.base)
    except FileNotFoundError as exc:
        raise ConfigError(f"operator file not found: {exc.filename}") from exc
    part = _partition(cfg, op.n)
    b = cfg.get("budget", {"mode": "adaptive", "tol": 1e-6})
    rng = RngStream(run.seed)
    d = int(b.get("oversampling", 10))
    if b.get("mode", "adaptive") == "fixed":
        budget = CompressionBudget.fixed(b["ranks"], d)
        H, rep = hodlr_compress(op, part, budget, rng)
    else:
        H, rep = hodlr_compress_adaptive(op, part, float(b["tol"]), d, rng)
    before = op.applies
    probes = int(cfg.get("error_probes", 4))
    verified = hodlr_error_estimate(op, H, probes, rng.split(99))
    save(run.path("hodlr.bin"), H)
    run.write_json("report.json", {"report": rep.to_dict(),
                                   "verification": {"error_estimate": verified, "probes": probes,
                                                    "applies": op.applies - before}})
    rep.write_spectra_csv(run.path("spectra.csv"), run.header)
    log.info("compressed N=%d L=%d with %d applies, ranks %s, error ~%.2e",
             op.n, part.depth, rep.applies, rep.level_ranks, verified)
    return EXIT_OK


def _grid(cfg, key, default):
    v = cfg.get(key, default)
    return tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else default


def cmd_bench_aspect(run: Run) -> int:
    c = run.cfg
    rows, claims = bench.bench_aspect(
        n=int(c.get("n", 512)), width=float(c.get("width", 1e4)),
        ratios=_grid(c, "ratios", (1 / 200, 1 / 100, 1 / 50, 1 / 25)), n_obs=int(c.get("n_obs", 100)),
        d=int(c.get("oversampling", bench.BENCH_OVERSAMPLING)),
        leaf_target=int(c.get("leaf_target", bench.BENCH_LEAF)),
        errors=_grid(c, "errors", bench.DEFAULT_ERRORS), measure=bool(c.get("measure", True)), seed=run.seed)
    run.write_csv("aspect.csv", rows)
    return _claims_exit(run, claims)


def cmd_bench_dims(run: Run) -> int:
    c = run.cfg
    rows, claims = bench.bench_dims(
        n_grid=tuple(int(v) for v in c.get("n_grid", (128, 256, 512))),
        nobs_grid=tuple(int(v) for v in c.get("nobs_grid", (100, 150, 200))),
        width=float(c.get("width", 1e4)), thickness=c.get("thickness"),
        d=int(c.get("oversampling", bench.BENCH_OVERSAMPLING)),
        leaf_target=int(c.get("leaf_target", bench.BENCH_LEAF)),
        errors=_grid(c, "errors", bench.DEFAULT_ERRORS), measure=bool(c.get("measure", True)), seed=run.seed)
    run.write_csv("dims.csv", rows)
    return _claims_exit(run, claims)


def cmd_bench_order(run: Run) -> int:
    c = run.cfg
    points = None
    if "points" in c:
        try:
            points = read_points(run.base / c["points"])
        except OSError as exc:
            raise ConfigError(f"cannot read points: {exc}") from exc
    rows, claims, scores = bench.bench_order(
        nx=int(c.get("nx", 16)), ny=int(c.get("ny", 16)), width=float(c.get("width", 1e4)),
        thickness=c.get("thickness"), obs_stride=int(c.get("obs_stride", 2)), seed=run.seed,
        points=points, orderings=tuple(c.get("orderings", ("shuffled", "kd"))))
    run.write_csv("order.csv", rows)
    run.write_json("locality.json", {"locality": scores})
    return _claims_exit(run, claims)


def cmd_sample(run: Run) -> int:
    c = run.cfg
    prob = _problem(c, run.seed)
    n = prob.prior.n
    rng = RngStream(run.seed)
    count = int(c.get("count", 100))
    if c.get("prior_only", False):
        misfit = dense_operator(np.zeros((n, n)))
        mean = prob.prior.mean_vector()
    else:
        misfit = prob.misfit_hessian()
        mean = map_estimate(prob.forward, prob.prior, prob.data, prob.noise_std,
                            tol=float(c.get("map_tol", 1e-8))).beta
    model = build_posterior(prob.prior, misfit, _partition(c, n), float(c.get("eps", 1e-6)),
                            int(c.get("oversampling", 10)), rng.split(1), mean=mean)
    std = pointwise_std(model, c.get("std_method", "probe"))
    S = sample(model, count, rng.split(2))
    inside = np.abs(S - mean[:, None]) <= 2 * std[:, None]
    n_paths = int(c.get("paths", min(count, 2)))
    write_envelope_csv(run.path("samples.csv"), prob.x, mean, std, S[:, :n_paths], run.header)
    coverage = float(np.mean(inside))
    run.write_json("posterior.json", {
        "applies": model.report.applies, "level_ranks": model.report.level_ranks,
        "error_estimate": model.report.error_estimate, "bound": model.bound().to_dict(),
        "coverage": coverage, "count": count,
        "prior_std_mean": float(np.mean(np.sqrt(np.diag(prob.prior.dense_cov())))) if n <= 4096 else None,
        "posterior_std_mean": float(np.mean(std)),
    })
    log.info("%d samples, +-2 sigma coverage %.3f", count, coverage)
    return EXIT_OK


def _read_spectra_csv(path):
    glob = []
    blocks: dict = {}
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    if not rows:
        raise ConfigError(f"{path}: empty spectra file")
    head = [h.strip() for h in rows[0]]
    for r in rows[1:]:
        rec = dict(zip(head, r))
        try:
            if "level" in rec:
                blocks.setdefault(int(rec["level"]), {}).setdefault(int(rec["block"]), []).append(
                    (int(rec["index"]), float(rec["sigma"])))
            else:
                glob.append((int(rec["index"]), float(rec["sigma"])))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed spectra row {r}") from exc
    return head, glob, blocks


def cmd_estimate(run: Run) -> int:
    c = run.cfg
    d = int(c.get("oversampling", 10))
    out = {}
    if "global_spectrum" in c:
        try:
            _, g, _ = _read_spectra_csv(run.base / c["global_spectrum"])
            _, _, blk = _read_spectra_csv(run.base / c["block_spectra"])
        except OSError as exc:
            raise ConfigError(f"cannot read spectra: {exc}") from exc
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from exc
        gs = [s for _, s in sorted(g)]
        depth = int(c.get("depth", max(blk)))
        levels = [[[s for _, s in sorted(blk.get(lv, {}).get(j, []))] for j in sorted(blk.get(lv, {}))]
                  for lv in range(1, depth + 1)]
        n = int(c["n"])
        try:
            curves = estimate_costs(gs, levels, n, depth, d, _grid(c, "errors", bench.DEFAULT_ERRORS),
                                    norm=c.get("norm"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        run.write_csv("costs.csv", list(curves.rows()))
        out["unreachable_points"] = int(sum(curves.lr_unreachable) + sum(curves.hodlr_unreachable))
    configs = []
    for z in c.get("zeta_configs", []):
        ranks = z["ranks"]
        depth = int(z["depth"])
        if np.ndim(ranks) == 0:
            ranks = [int(ranks)] * depth
        configs.append({"name": z.get("name", ""), "n": int(z["n"]), "depth": depth,
                        "oversampling": int(z.get("oversampling", d)),
                        "zeta": zeta(ranks, int(z.get("oversampling", d)), int(z["n"]), depth)})
    out["zeta_configs"] = configs
    run.write_json("estimate.json", out)
    return EXIT_OK


def cmd_solve_map(run: Run) -> int:
    c = run.cfg
    prob = _problem(c, run.seed)
    res = map_estimate(prob.forward, prob.prior, prob.data, prob.noise_std,
                       tol=float(c.get("tol", 1e-8)), max_iters=int(c.get("max_iters", 50)))
    err = float(np.linalg.norm(res.beta - prob.beta_true) / np.linalg.norm(prob.beta_true))
    run.write_csv("map.csv", [{"x": x, "beta_map": b, "beta_true": t}
                              for x, b, t in zip(prob.x, res.beta, prob.beta_true)])
    run.write_json("map.json", {"iterations": res.iterations, "cg_iterations": res.cg_iterations,
                                "costs": res.costs, "grad_norms": res.grad_norms,
                                "relative_l2_error": err})
    log.info("MAP in %d Gauss-Newton iterations, relative error %.3e", res.iterations, err)
    return EXIT_OK


VERBS = {
    "compress": cmd_compress,
    "bench-aspect": cmd_bench_aspect,
    "bench-dims": cmd_bench_dims,
    "bench-order": cmd_bench_order,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "solve-map": cmd_solve_map,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hodlr", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=sorted(VERBS))
    ap.add_argument("config", nargs="?", help="JSON config file (empty config if omitted)")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.config:
            cfg_path = Path(args.config)
            try:
                cfg = json.loads(cfg_path.read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {cfg_path}: {exc}") from exc
            if not isinstance(cfg, dict):
                raise ConfigError("config must be a JSON object")
            base = cfg_path.parent
        else:
            cfg, base = {}, Path(".")
        seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
        out = Path(args.out or cfg.get("out") or ".")
        cfg = {k: v for k, v in cfg.items() if k not in ("seed", "out")}
        out.mkdir(parents=True, exist_ok=True)
        return VERBS[args.verb](Run(cfg, seed, out, base))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
