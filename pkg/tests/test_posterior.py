import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hodlr.core import densify
from hodlr.dense import RngStream
from hodlr.operators import PriorOperator, dense_operator, preconditioned_misfit, toy_problem
from hodlr.partition import build_partition, default_depth
from hodlr.posterior import (
    BoundReport,
    build_posterior,
    covariance_bound_check,
    pointwise_std,
    sample,
    write_envelope_csv,
)


def dense_post(prior, misfit):
    """Oracle ``Gamma_post = P (I + P H P)^{-1} P`` from dense matrices."""
    n = prior.n
    P = prior.sqrt_apply(np.eye(n))
    Hp = P @ misfit.dense() @ P
    return P @ np.linalg.solve(np.eye(n) + Hp, P)


def toy_model(n, eps, thickness=100.0, n_obs=None, rel_noise=0.01, seed=0):
    tp = toy_problem(n=n, thickness=thickness, n_obs=n_obs or min(100, n // 2), rel_noise=rel_noise)
    part = build_partition(n, default_depth(n, 32))
    m = build_posterior(tp.prior, tp.misfit_hessian(), part, eps, 10, RngStream(seed))
    return tp, m


def mc_zscores(X, mean, G):
    """Max entrywise |C - G| / SE for the sample covariance about a known mean."""
    m = X.shape[1]
    D = X - mean[:, None]
    C = D @ D.T / m
    se = np.sqrt((np.outer(np.diag(G), np.diag(G)) + G**2) / m)
    return np.max(np.abs(C - G) / se)


def random_pair(seed, n=None):
    rg = np.random.default_rng(seed)
    n = n or int(rg.integers(2, 40))
    Q, _ = np.linalg.qr(rg.standard_normal((n, n)))
    A = (Q * rg.uniform(0, 5, n) ** rg.uniform(0.5, 2)) @ Q.T
    E = rg.standard_normal((n, n))
    E = (E + E.T) / 2
    E *= rg.uniform(1e-3, 0.3) / np.linalg.norm(E, 2)
    return (A + A.T) / 2, A + E


# -- build_posterior ---------------------------------------------------------------------

def test_zero_misfit_is_prior():
    prior = PriorOperator(128)
    m = build_posterior(prior, dense_operator(np.zeros((128, 128))), build_partition(128, 2), 1e-6, 5,
                        RngStream(0))
    G = m.cov_apply(np.eye(128))
    assert np.linalg.norm(G - prior.dense_cov(), 2) <= 1e-10 * np.linalg.norm(prior.dense_cov(), 2)


def test_toy_512_within_bound():
    tp, m = toy_model(512, 1e-6)
    G = dense_post(tp.prior, tp.misfit_hessian())
    Gt = m.cov_apply(np.eye(512))
    err = np.linalg.norm(G - Gt, 2) / np.linalg.norm(G, 2)
    b = m.bound()
    assert b.assumptions_ok
    assert err <= b.bound


@pytest.mark.parametrize("n,eps,thickness", [(128, 1e-4, 100.0), (128, 1e-6, 400.0), (256, 1e-5, 100.0),
                                             (256, 1e-7, 400.0)])
def test_end_to_end_bound(n, eps, thickness):
    tp, m = toy_model(n, eps, thickness, n_obs=100)
    G = dense_post(tp.prior, tp.misfit_hessian())
    err = np.linalg.norm(G - m.cov_apply(np.eye(n)), 2) / np.linalg.norm(G, 2)
    assert err <= m.bound().bound


def test_informative_limit_reduces_std():
    tp, m = toy_model(256, 1e-8, rel_noise=1e-4)
    post = pointwise_std(m, method="exact")
    prior = np.sqrt(np.diag(tp.prior.dense_cov()))
    obs = tp.forward.obs
    assert np.all(post[obs] < prior[obs])
    oracle = np.sqrt(np.diag(dense_post(tp.prior, tp.misfit_hessian())))
    assert np.all(oracle[obs] < prior[obs])


def test_build_posterior_rejects():
    prior = PriorOperator(64)
    op = dense_operator(np.zeros((64, 64)))
    with pytest.raises(ValueError):
        build_posterior(prior, op, build_partition(64, 1), 1.0, 5, RngStream(0))
    with pytest.raises(ValueError):
        build_posterior(prior, op, build_partition(32, 1), 1e-3, 5, RngStream(0))
    with pytest.raises(ValueError):
        build_posterior(prior, op, build_partition(64, 1), 1e-3, 5, RngStream(0), mean=np.zeros(3))


# -- sampling ------------------------------------------------------------------------

def test_zero_misfit_samples_match_prior():
    n = 32
    prior = PriorOperator(n)
    m = build_posterior(prior, dense_operator(np.zeros((n, n))), build_partition(n, 1), 1e-6, 5, RngStream(0))
    X = sample(m, 100000, RngStream(3))
    assert mc_zscores(X, m.mean, prior.dense_cov()) <= 4


def test_samples_reproducible():
    _, m = toy_model(64, 1e-6)
    a = sample(m, 50, RngStream(9))
    b = sample(m, 50, RngStream(9))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(m, 50, RngStream(10)))
    # column i draws from (seed, i); batch width only changes BLAS rounding
    assert np.allclose(a[:, :10], sample(m, 10, RngStream(9)), rtol=1e-12, atol=0)


def test_toy_samples_match_dense_covariance():
    _, m = toy_model(64, 1e-6, n_obs=32)
    X = sample(m, 20000, RngStream(1))
    assert mc_zscores(X, m.mean, m.cov_apply(np.eye(64))) <= 4


def test_sample_count_positive():
    _, m = toy_model(64, 1e-4)
    with pytest.raises(ValueError):
        sample(m, 0, RngStream(0))


# -- pointwise_std ---------------------------------------------------------------------

def test_std_prior_only_probe():
    n = 512
    prior = PriorOperator(n)
    m = build_posterior(prior, dense_operator(np.zeros((n, n))), build_partition(n, 3), 1e-6, 5, RngStream(0))
    ref = np.sqrt(np.diag(prior.dense_cov()))
    assert np.max(np.abs(pointwise_std(m) / ref - 1)) <= 0.05


def test_std_identity_kernel():
    n = 64
    prior = PriorOperator(n, width=float(n), gamma=0.0, delta=1.0)
    m = build_posterior(prior, dense_operator(np.zeros((n, n))), build_partition(n, 2), 1e-6, 5, RngStream(0))
    assert np.allclose(pointwise_std(m), 1.0, rtol=1e-12)
    assert np.allclose(pointwise_std(m, method="exact"), 1.0, rtol=1e-12)


def test_std_probe_vs_exact_on_toy():
    _, m = toy_model(512, 1e-6)
    ex = pointwise_std(m, method="exact")
    assert np.max(np.abs(pointwise_std(m) / ex - 1)) <= 0.05


def test_std_monotone_in_data():
    n = 200
    less = toy_model(n, 1e-9, n_obs=50)[1]
    more = toy_model(n, 1e-9, n_obs=100)[1]
    a, b = pointwise_std(less, method="exact"), pointwise_std(more, method="exact")
    assert np.all(b <= a * (1 + 1e-6))


def test_std_unknown_method():
    _, m = toy_model(64, 1e-4)
    with pytest.raises(ValueError):
        pointwise_std(m, method="hutch")


def test_posterior_below_prior():
    tp = toy_problem(n=256)
    Gp = tp.prior.dense_cov()
    G = dense_post(tp.prior, tp.misfit_hessian())
    assert np.linalg.eigvalsh(Gp - G)[0] >= -1e-10 * np.linalg.norm(Gp, 2)


# -- covariance bound ------------------------------------------------------------------

def test_bound_identical_pair():
    A, _ = random_pair(0, 10)
    r = covariance_bound_check(A, A)
    assert r.measured == 0 and r.bound == 0 and r.holds and r.assumptions_ok


@pytest.mark.parametrize("eps", [1e-3, 0.1, 0.3])
def test_bound_negative_shift_closed_form(eps):
    # (I + 0)^{-1} = I, (I - eps I)^{-1} = I / (1 - eps): relative error eps / (1 - eps)
    r = covariance_bound_check(np.zeros((5, 5)), -eps * np.eye(5))
    assert r.eps_star == pytest.approx(eps, rel=1e-14)
    assert r.measured == pytest.approx(eps / (1 - eps), rel=1e-12)
    assert r.sharp_bound == pytest.approx(eps / (1 - eps), rel=1e-12)
    assert r.bound == pytest.approx(eps / (1 + eps), rel=1e-12)
    assert r.holds_sharp and not r.holds


@pytest.mark.parametrize("eps", [1e-3, 0.1, 0.3])
def test_bound_positive_shift_is_tight(eps):
    r = covariance_bound_check(np.zeros((4, 4)), eps * np.eye(4))
    assert r.measured == pytest.approx(eps / (1 + eps), rel=1e-12)
    assert r.holds


def test_bound_uses_lambda_min():
    A = np.diag([1.0, 3.0])
    r = covariance_bound_check(A, A + 0.2 * np.eye(2))
    assert r.lambda_min == pytest.approx(1.0)
    assert r.eps_star == pytest.approx(0.1)
    assert r.measured == pytest.approx((1 / 2 - 1 / 2.2) / (1 / 2), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_sharp_bound_random_pairs(seed):
    A, At = random_pair(seed)
    r = covariance_bound_check(A, At)
    assert r.assumptions_ok
    assert r.holds_sharp


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_stated_bound_for_upward_perturbations(seed):
    A, At = random_pair(seed)
    E = At - A
    At = A + E @ E / np.linalg.norm(E, 2)  # PSD perturbation with the same norm
    assert covariance_bound_check(A, At).holds


def test_bound_assumption_notes():
    r = covariance_bound_check(-2 * np.eye(3), np.zeros((3, 3)))
    assert not r.assumptions_ok and r.notes
    r = BoundReport.from_eps(1.5, 0.0)
    assert not r.assumptions_ok and r.sharp_bound == float("inf")
    with pytest.raises(ValueError):
        covariance_bound_check(np.eye(2), np.eye(3))


# -- export ------------------------------------------------------------------------

def test_envelope_csv(tmp_path):
    x = np.array([0.0, 1.0])
    path = tmp_path / "env.csv"
    write_envelope_csv(path, x, np.array([1.0, 2.0]), np.array([0.5, 0.25]), np.ones((2, 3)), header="# h")
    lines = path.read_text().splitlines()
    assert lines[0] == "# h"
    assert lines[1] == "x,mean,lower,upper,sample_0,sample_1,sample_2"
    assert lines[3].split(",")[:4] == ["1.0", "2.0", "1.5", "2.5"]
