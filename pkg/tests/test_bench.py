import numpy as np
import pytest

from hodlr import bench
from hodlr.compression import estimate_costs
from hodlr.operators import toy_misfit_hessian


@pytest.fixture(scope="module")
def aspect():
    return bench.bench_aspect()


@pytest.fixture(scope="module")
def dims():
    return bench.bench_dims()


def test_aspect_claims(aspect):
    rows, claims = aspect
    assert len(claims) == 4
    for c in claims:
        assert c.passed, (c.name, c.detail)


def test_aspect_rows_have_both_cost_kinds(aspect):
    rows, _ = aspect
    assert len(rows) == 4 * len(bench.DEFAULT_ERRORS)
    for r in rows:
        for key in ("lr_applies_modeled", "hodlr_applies_modeled", "lr_applies_measured",
                    "hodlr_applies_measured"):
            assert isinstance(r[key], int) and r[key] > 0


def test_aspect_error_grid():
    e = np.asarray(bench.DEFAULT_ERRORS)
    assert e[0] == pytest.approx(1e-8) and e[-1] == pytest.approx(1e-2)


def test_dims_claims(dims):
    rows, claims = dims
    assert len(claims) == 3
    for c in claims:
        assert c.passed, (c.name, c.detail)
    depths = sorted({(r["n"], r["depth"]) for r in rows if r["study"] == "dims"})
    assert [d for _, d in depths] == [2, 3, 4]  # one level per doubling


def test_order_claims():
    rows, claims, scores = bench.bench_order()
    assert all(c.passed for c in claims), [c.detail for c in claims]
    assert scores["kd"] > scores["shuffled"]
    assert rows[0]["index"] == 1 and len(rows) == 128


def test_order_one_dimensional_identity():
    n = 16 * 16
    pts = np.arange(n, dtype=float)[:, None]
    rows, _, scores = bench.bench_order(points=pts, orderings=("natural", "kd"))
    assert all(r["sigma_natural"] == r["sigma_kd"] for r in rows)
    assert scores["natural"] == scores["kd"]


def test_order_rejects_unknown_ordering():
    with pytest.raises(ValueError):
        bench.bench_order(nx=4, ny=4, orderings=("spiral",))


def test_toy_crossover_from_spectra():
    out = {}
    for phi in (1 / 200, 1 / 25):
        A = toy_misfit_hessian(512, thickness=1e4 * phi).dense()
        g, levels, _ = bench.dense_spectra(A, 4)
        c = estimate_costs(g, levels, 512, 4, bench.BENCH_OVERSAMPLING, [1e-4])
        out[phi] = (c.hodlr_cost[0], c.lr_cost[0])
    assert out[1 / 200][0] < out[1 / 200][1]
    assert out[1 / 25][1] <= out[1 / 25][0]
