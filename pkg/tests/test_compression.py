import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hodlr.compression import (
    ADAPTIVE_START_RANK,
    CompressionBudget,
    CompressionReport,
    estimate_costs,
    hodlr_compress,
    hodlr_compress_adaptive,
    hodlr_error_estimate,
    lowrank_compress_adaptive,
    randomized_svd,
    zeta,
)
from hodlr.core import HodlrMatrix, LowRankFactor, densify, random_hodlr, save, truncate_dense
from hodlr.dense import RngStream
from hodlr.operators import (
    PriorOperator,
    dense_operator,
    permuted_operator,
    preconditioned_misfit,
    toy_misfit_hessian,
)
from hodlr.partition import Permutation, build_partition, default_depth

from conftest import rel2


def planted(n, depth, ranks, seed=0, decay=0.5):
    p = build_partition(n, depth)
    H = random_hodlr(p, ranks, RngStream(seed), decay=decay)
    return p, H, densify(H)


# -- randomized_svd ------------------------------------------------------------------

def test_rsvd_exact_rank_three(rng):
    X = rng.standard_normal((80, 3))
    A = X @ np.diag([3.0, 2.0, 1.0]) @ X.T
    op = dense_operator(A)
    f, rep = randomized_svd(op, 3, 5, RngStream(1))
    assert np.linalg.norm(f.dense() - A, 2) <= 1e-10 * np.linalg.norm(A, 2)
    assert rep.applies == 16 == op.applies


def test_rsvd_sigma_vs_dense_svd(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((100, 100)))
    lam = 0.7 ** np.arange(100) * np.where(np.arange(100) % 3 == 1, -1.0, 1.0)
    A = (Q * lam) @ Q.T
    f, _ = randomized_svd(dense_operator(A), 10, 10, RngStream(2))
    ref = np.linalg.svd(A, compute_uv=False)[:10]
    assert np.allclose(f.sigma, ref, rtol=1e-2, atol=0)


@pytest.mark.parametrize("r,d", [(0, 1), (4, 4), (20, 10)])
def test_rsvd_counter_is_two_passes(r, d, rng):
    G = rng.standard_normal((60, 60))
    op = dense_operator(G + G.T)
    op.applies = 7
    _, rep = randomized_svd(op, r, d, RngStream(0))
    assert rep.applies == 2 * (r + d)
    assert op.applies == 7 + 2 * (r + d)


def test_rsvd_rejects_oversized_budget():
    with pytest.raises(ValueError):
        randomized_svd(dense_operator(np.eye(10)), 6, 5, RngStream(0))


# -- fixed-rank peeling ----------------------------------------------------------------

def test_zeta_worked_value():
    assert zeta([20, 20, 20], 10, 512, 3) == 244


def test_fixed_apply_count_244():
    p, H, A = planted(512, 3, [20, 20, 20])
    op = dense_operator(A)
    _, rep = hodlr_compress(op, p, CompressionBudget.fixed([20, 20, 20], 10), RngStream(3))
    assert rep.applies == op.applies == 244
    assert rep.modeled_applies == 244


@settings(max_examples=25, deadline=None)
@given(n=st.integers(64, 400), depth=st.integers(1, 4), r=st.integers(0, 12), d=st.integers(1, 8),
       seed=st.integers(0, 2**16))
def test_fixed_apply_count_exact(n, depth, r, d, seed):
    p = build_partition(n, depth)
    G = np.random.default_rng(seed).standard_normal((n, n))
    op = dense_operator(G + G.T)
    ranks = [r] * depth
    _, rep = hodlr_compress(op, p, CompressionBudget.fixed(ranks, d), RngStream(seed))
    expect = 2 * (r * depth + d * depth) + math.ceil(n / 2**depth)
    assert rep.applies == op.applies == expect == zeta(ranks, d, n, depth)


def test_planted_round_trip():
    p, H, A = planted(512, 3, [12, 8, 6], seed=5)
    Ht, _ = hodlr_compress(dense_operator(A), p, CompressionBudget.fixed([12, 8, 6], 10), RngStream(4))
    assert rel2(densify(Ht), A) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(n=st.integers(96, 320), depth=st.integers(1, 3), r=st.integers(1, 6), d=st.integers(5, 8),
       seed=st.integers(0, 2**16))
def test_exact_rank_recovery(n, depth, r, d, seed):
    p, H, A = planted(n, depth, [r] * depth, seed=seed, decay=0.8)
    Ht, _ = hodlr_compress(dense_operator(A), p, CompressionBudget.fixed([r] * depth, d), RngStream(seed + 1))
    assert rel2(densify(Ht), A) <= 1e-9


def test_zero_operator_gives_zero_factors():
    p = build_partition(256, 3)
    op = dense_operator(np.zeros((256, 256)))
    H, _ = hodlr_compress(op, p, CompressionBudget.fixed([5, 5, 5], 5), RngStream(0))
    for level in H.factors:
        for f in level:
            assert np.all(f.dense() == 0)
    assert all(np.all(D == 0) for D in H.leaves)


def test_infeasible_budget_stores_block_dense():
    p, H, A = planted(64, 2, [30, 30], seed=2)
    A = A + 1e-3 * np.random.default_rng(0).standard_normal((64, 64))
    A = (A + A.T) / 2
    Ht, rep = hodlr_compress(dense_operator(A), p, CompressionBudget.fixed([30, 30], 5), RngStream(0))
    assert [2, 0] in rep.dense_blocks and [2, 1] in rep.dense_blocks
    for (a, b), (_, c) in p.pairs(2):
        assert np.allclose(densify(Ht)[a:b, b:c], A[a:b, b:c], atol=1e-12)
    assert [1, 0] in rep.dense_blocks  # 30 + 5 >= 32 columns


def test_leaf_asymmetry_reported():
    p, H, A = planted(128, 2, [4, 4])
    _, rep = hodlr_compress(dense_operator(A), p, CompressionBudget.fixed([4, 4], 6), RngStream(0))
    assert rep.leaf_asymmetry < 1e-10
    B = A.copy()
    B[0, 1] += 1.0
    _, rep2 = hodlr_compress(dense_operator(B, rtol=1.0), p, CompressionBudget.fixed([128, 128], 6),
                             RngStream(0))
    assert rep2.leaf_asymmetry > 1e-3


def test_determinism_byte_identical(tmp_path):
    p, H, A = planted(256, 3, [6, 6, 6])
    out = []
    for i in range(2):
        Ht, _ = hodlr_compress(dense_operator(A), p, CompressionBudget.fixed([6, 6, 6], 5), RngStream(11))
        path = tmp_path / f"h{i}.bin"
        save(path, Ht)
        out.append(path.read_bytes())
    assert out[0] == out[1]


def test_fixed_rejects_wrong_inputs():
    p = build_partition(128, 2)
    op = dense_operator(np.eye(128))
    with pytest.raises(ValueError):
        hodlr_compress(op, p, CompressionBudget.fixed([4], 5), RngStream(0))
    with pytest.raises(ValueError):
        hodlr_compress(op, build_partition(64, 2), CompressionBudget.fixed([4, 4], 5), RngStream(0))
    with pytest.raises(ValueError):
        hodlr_compress(op, p, CompressionBudget.adaptive(1e-3), RngStream(0))


def test_budget_invariants():
    with pytest.raises(ValueError):
        CompressionBudget.fixed([1, 2], d=0)
    with pytest.raises(ValueError):
        CompressionBudget.fixed([-1], d=3)
    with pytest.raises(ValueError):
        CompressionBudget.adaptive(0.0)
    assert CompressionBudget.fixed([2, 4]).mean_rank == 3.0


# -- adaptive peeling ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_preconditioned():
    n = 512
    prior = PriorOperator(n)
    return preconditioned_misfit(prior, toy_misfit_hessian(n))


def test_adaptive_toy_meets_1e6(toy_preconditioned):
    op = toy_preconditioned
    A = op.dense()
    op.applies = 0
    p = build_partition(512, 3)
    H, rep = hodlr_compress_adaptive(op, p, 1e-6, 10, RngStream(0))
    assert rel2(densify(H), A) <= 1e-6
    assert rep.applies == op.applies
    assert rep.error_estimate is not None and rep.error_estimate <= 1e-6


def test_adaptive_exact_rank_four_overshoot():
    p, H, A = planted(512, 3, [4, 4, 4], seed=8, decay=0.9)
    Ht, rep = hodlr_compress_adaptive(dense_operator(A), p, 1e-8, 10, RngStream(1))
    assert max(max(r) for r in rep.block_ranks) <= 2 * 4
    assert rel2(densify(Ht), A) <= 1e-8


def test_adaptive_records_spectra_and_counter():
    p, H, A = planted(256, 2, [6, 3], seed=1)
    op = dense_operator(A)
    op.applies = 3
    _, rep = hodlr_compress_adaptive(op, p, 1e-5, 10, RngStream(2))
    assert rep.applies == op.applies - 3
    assert len(rep.spectra) == 2 and len(rep.spectra[1]) == 2
    assert all(list(s) == sorted(s, reverse=True) for lv in rep.spectra for s in lv)


@pytest.mark.parametrize("eps", [0.0, 1.0, 1.5, -1e-3])
def test_adaptive_rejects_bad_tolerance(eps):
    p = build_partition(64, 1)
    with pytest.raises(ValueError):
        hodlr_compress_adaptive(dense_operator(np.eye(64)), p, eps, 10, RngStream(0))


def test_adaptive_full_rank_falls_back_to_dense():
    G = np.random.default_rng(3).standard_normal((64, 64))
    A = G + G.T
    p = build_partition(64, 2)
    H, rep = hodlr_compress_adaptive(dense_operator(A), p, 1e-12, 4, RngStream(0))
    assert [2, 0] in rep.dense_blocks and [2, 1] in rep.dense_blocks
    assert rel2(densify(H), A) <= 1e-10


def test_lowrank_adaptive_meets_tolerance(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((200, 200)))
    A = (Q * 0.5 ** np.arange(200)) @ Q.T
    f, rep = lowrank_compress_adaptive(dense_operator(A), 1e-6, 10, RngStream(0))
    assert rel2(f.dense(), A) <= 1e-6
    assert rep.level_ranks[0] == int(np.sum(0.5 ** np.arange(200) > 0.5e-6))


# -- estimate_costs ----------------------------------------------------------------

def test_costs_flat_tiny_spectrum():
    g = np.full(50, 1e-9)
    c = estimate_costs(g, [g], 100, 1, 7, [1e-8, 1e-6, 1e-2], norm=1.0)
    assert c.lr_cost == [7, 7, 7]
    assert c.lr_rank == [0, 0, 0]
    assert not any(c.lr_unreachable)


@pytest.mark.parametrize("e", [1e-2, 3e-4, 1e-6, 1e-9])
def test_costs_geometric_log2(e):
    s = 2.0 ** -np.arange(1, 61)
    c = estimate_costs(s, [s], 128, 1, 5, [e])
    # sigma_{r+1} / sigma_1 = 2^{-r} <= e  <=>  r >= log2(1/e)
    assert c.lr_rank[0] == math.ceil(math.log2(1 / e))


def test_costs_unreachable_flag():
    s = np.array([1.0, 0.5, 0.25])
    c = estimate_costs(s, [[s, s]], 8, 1, 2, [0.3, 1e-3])
    assert c.lr_unreachable == [False, True]
    assert c.hodlr_unreachable == [False, True]


def test_costs_hodlr_uses_level_budget():
    s = 10.0 ** -np.arange(0, 8.0)
    blocks = [[s], [s * 0.1, s * 0.2]]
    c = estimate_costs(s, blocks, 256, 2, 3, [1e-4], norm=1.0)
    # threshold 1e-4 / 2 = 5e-5: level 1 keeps 1..1e-4, level 2 keeps 0.2..2e-4
    assert c.hodlr_ranks[0] == [5, 4]
    assert c.hodlr_cost[0] == zeta([5, 4], 3, 256, 2)


def test_costs_reject_unsorted():
    with pytest.raises(ValueError):
        estimate_costs([1.0, 2.0], [[1.0]], 8, 1, 1, [1e-2])


def test_costs_rows_columns():
    s = 0.5 ** np.arange(20)
    rows = list(estimate_costs(s, [s], 64, 1, 2, [1e-2]).rows())
    assert set(rows[0]) == {"error", "lr_rank", "lr_applies_modeled", "lr_unreachable",
                            "hodlr_ranks", "hodlr_applies_modeled", "hodlr_unreachable"}


# -- hodlr_error_estimate ---------------------------------------------------------------

def test_error_estimate_exact():
    p, H, A = planted(256, 3, [5, 5, 5])
    assert hodlr_error_estimate(dense_operator(A), H) <= 1e-12


def test_error_estimate_scaled():
    p, H, A = planted(256, 3, [5, 5, 5])
    Hs = HodlrMatrix(p, tuple(tuple(LowRankFactor(f.U, f.sigma * (1 - 1e-3), f.V) for f in lv)
                              for lv in H.factors),
                     tuple(D * (1 - 1e-3) for D in H.leaves))
    est = hodlr_error_estimate(dense_operator(A), Hs)
    assert abs(est - 1e-3) <= 1e-4


@pytest.mark.parametrize("eps", [1e-2, 1e-4])
def test_error_estimate_vs_dense(eps, toy_preconditioned):
    op = toy_preconditioned
    A = op.dense()
    H, _ = hodlr_compress_adaptive(op, build_partition(512, 3), eps, 5, RngStream(7))
    true = rel2(densify(H), A)
    est = hodlr_error_estimate(op, H, probes=4, rng=RngStream(3))
    assert true / 3 <= est <= 3 * true


def test_error_estimate_needs_two_probes():
    p, H, A = planted(64, 1, [2])
    with pytest.raises(ValueError):
        hodlr_error_estimate(dense_operator(A), H, probes=1)


# -- invariants ------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(n=st.integers(32, 512), depth=st.integers(1, 4), eps=st.floats(1e-6, 1e-1),
       seed=st.integers(0, 2**16))
def test_blockwise_truncation_bound(n, depth, eps, seed):
    if n < 2**depth:
        depth = 1
    rg = np.random.default_rng(seed)
    x = np.sort(rg.uniform(0, 1, n))
    A = np.exp(-np.abs(x[:, None] - x[None, :]) * rg.uniform(1, 30)) + 1e-2 * rg.standard_normal((n, n))
    A = (A + A.T) / 2
    p = build_partition(n, depth)
    At = densify(truncate_dense(A, p, tol=eps))
    for level in range(1, depth + 1):
        for (a, b), (_, c) in p.pairs(level):
            assert np.linalg.norm(A[a:b, b:c] - At[a:b, b:c], 2) <= eps * (1 + 1e-12)
    assert np.linalg.norm(A - At, 2) <= eps * depth * (1 + 1e-10)


def test_log_growth_of_cost():
    applies, lr_modeled = [], []
    for n in (128, 256, 512, 1024):
        p = build_partition(n, default_depth(n, 64))
        op = toy_misfit_hessian(n)
        _, rep = hodlr_compress_adaptive(op, p, 1e-4, 10, RngStream(0))
        applies.append(rep.applies)
        _, lrep = lowrank_compress_adaptive(toy_misfit_hessian(n), 1e-4, 10, RngStream(0))
        lr_modeled.append(lrep.modeled_applies)
    inc = np.diff(applies)
    assert np.all(inc > 0)
    assert np.all(np.abs(inc - inc.mean()) <= 0.3 * inc.mean())
    assert max(lr_modeled) - min(lr_modeled) <= 10 + 2


def test_conjugation_consistency():
    n = 256
    op = toy_misfit_hessian(n, thickness=200.0)
    A = op.dense()
    perm = Permutation(np.random.default_rng(1).permutation(n))
    pop = permuted_operator(op, perm)
    H, _ = hodlr_compress_adaptive(pop, build_partition(n, 2), 1e-3, 5, RngStream(0))
    Ht = densify(H)
    B = perm.apply(np.eye(n))
    back = B.T @ Ht @ B
    e_fwd = np.linalg.norm(Ht - perm.conjugate(A), 2)
    e_back = np.linalg.norm(back - A, 2)
    assert abs(e_fwd - e_back) <= 1e-10 * np.linalg.norm(A, 2)


def test_report_serialization(tmp_path):
    p, H, A = planted(64, 1, [3])
    _, rep = hodlr_compress(dense_operator(A), p, CompressionBudget.fixed([3], 4), RngStream(0))
    assert isinstance(rep, CompressionReport)
    path = tmp_path / "s.csv"
    rep.write_spectra_csv(path, header="# x")
    lines = path.read_text().splitlines()
    assert lines[0] == "# x" and lines[1] == "level,block,index,sigma"
    assert len(lines) == 2 + len(rep.spectra[0][0])
    assert json.loads(rep.to_json())["applies"] == rep.applies


def test_start_rank_constant():
    assert ADAPTIVE_START_RANK == 8
