"""Matrix-free symmetric operators and the toy linearized inverse problem.

The toy problem lives on a periodic 1-D grid of ``n`` points on ``[0, W)``.
A basal parameter field ``beta`` is observed through a slab smoother ``S``:
the value at the top of a slab of thickness ``h`` of a field that is
harmonic inside the slab and equals ``beta`` at its base.  In Fourier space
``S`` has symbol ``1 / cosh(h * kappa)``, so thin slabs (small ``h / W``)
give localized sensitivities and thick slabs give smooth, global ones.
Observations pick ``n_obs`` uniformly spaced grid values of ``S beta``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dense import SMALL_MATRIX_CAP, RngStream, read_matrix_market, sym_eig
from .partition import Permutation

__all__ = [
    "LinearOperator",
    "dense_operator",
    "permuted_operator",
    "SlabSmoother",
    "ToyMisfitHessian",
    "toy_misfit_hessian",
    "toy_misfit_hessian_2d",
    "PriorOperator",
    "prior_sqrt_apply",
    "preconditioned_misfit",
    "LinearToyForward",
    "ToyProblem",
    "toy_problem",
    "true_log_sliding",
    "PRIOR_MEAN",
    "MapResult",
    "ConvergenceError",
    "map_estimate",
    "operator_from_config",
]

PRIOR_MEAN = 6.73315
DEFAULT_WIDTH = 1.0e4


def true_log_sliding(x, width: float = DEFAULT_WIDTH):
    return np.log(1200.0 + 1100.0 * np.sin(2.0 * np.pi * np.asarray(x) / width))


class LinearOperator:
    """Symmetric operator known only through batched products.

    ``applies`` counts operator columns, i.e. the number of matrix-vector
    products performed so far.  The counter is guarded by a lock, so totals
    are exact under concurrent use.
    """

    def __init__(self, n: int, matmat: Callable[[np.ndarray], np.ndarray], name: str = ""):
        self.n = int(n)
        self._matmat = matmat
        self.name = name
        self.applies = 0
        self._lock = threading.Lock()

    @property
    def shape(self) -> tuple[int, int]:
        return self.n, self.n

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        vec = X.ndim == 1
        if vec:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != self.n:
            raise ValueError(f"{self.name or 'operator'}: expected {self.n} rows, got {X.shape}")
        with self._lock:
            self.applies += X.shape[1]
        Y = np.asarray(self._matmat(X), dtype=float)
        return Y[:, 0] if vec else Y

    def __matmul__(self, X):
        return self.apply(X)

    def dense(self, cap: int = SMALL_MATRIX_CAP) -> np.ndarray:
        """Materialize by applying to the identity (costs ``n`` applies)."""
        if self.n > cap:
            raise ValueError(f"N={self.n} exceeds small-matrix cap {cap}")
        A = self.apply(np.eye(self.n))
        return (A + A.T) / 2

    def __repr__(self):
        return f"LinearOperator(n={self.n}, name={self.name!r}, applies={self.applies})"


def dense_operator(A, rtol: float = 1e-10) -> LinearOperator:
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"dense operator must be square, got {A.shape}")
    scale = max(np.max(np.abs(A), initial=0.0), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T), initial=0.0) > rtol * scale:
        raise ValueError("dense operator is not symmetric")
    return LinearOperator(A.shape[0], lambda X: A @ X, name="dense")


def permuted_operator(op: LinearOperator, perm: Permutation) -> LinearOperator:
    """``B A B^T`` for the reordering ``perm``."""
    if perm.n != op.n:
        raise ValueError("permutation size does not match operator")
    inv = perm.inverse
    fwd = perm.forward
    return LinearOperator(op.n, lambda X: op.apply(X[inv])[fwd], name=f"permuted({op.name})")


# -- toy sensitivity model -------------------------------------------------------

def _discrete_wavenumbers(n: int, spacing: float) -> np.ndarray:
    """``sqrt`` of the symbol of the centered second difference, per rfft mode."""
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=spacing)
    return (2.0 / spacing) * np.abs(np.sin(k * spacing / 2.0))


class SlabSmoother:
    """Periodic slab smoother with Fourier symbol ``1/cosh(thickness * kappa)``."""

    def __init__(self, n: int, width: float = DEFAULT_WIDTH, thickness: float = 100.0):
        if n < 4 or width <= 0 or thickness <= 0:
            raise ValueError("need n >= 4 and positive width, thickness")
        self.n = n
        self.width = float(width)
        self.thickness = float(thickness)
        self.spacing = self.width / n
        arg = self.thickness * _discrete_wavenumbers(n, self.spacing)
        self.symbol = 1.0 / np.cosh(np.minimum(arg, 700.0))

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        return np.fft.irfft(self.symbol.reshape((-1,) + (1,) * (X.ndim - 1)) * np.fft.rfft(X, axis=0),
                            n=self.n, axis=0)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n) * self.spacing


def observation_indices(n: int, n_obs: int) -> np.ndarray:
    if not 1 <= n_obs <= n:
        raise ValueError(f"need 1 <= n_obs <= n, got n_obs={n_obs}, n={n}")
    return (np.arange(n_obs) * n) // n_obs


class ToyMisfitHessian(LinearOperator):
    """Gauss-Newton misfit Hessian ``S^T B^T Gamma_noise^{-1} B S``.

    Each column costs two smoother applications, mirroring the two linearized
    solves behind one Hessian-vector product.
    """

    def __init__(self, smoother: SlabSmoother, obs: np.ndarray, noise_std: np.ndarray):
        self.smoother = smoother
        self.obs = np.asarray(obs)
        self.noise_std = np.broadcast_to(np.asarray(noise_std, dtype=float), self.obs.shape).copy()
        if np.any(self.noise_std <= 0):
            raise ValueError("noise standard deviations must be positive")
        w = 1.0 / self.noise_std**2

        def matmat(X):
            Y = smoother.apply(X)
            Z = np.zeros_like(Y)
            Z[self.obs] = Y[self.obs] * w[:, None]
            return smoother.apply(Z)

        super().__init__(smoother.n, matmat, name="toy-misfit")


def toy_misfit_hessian(n: int, width: float = DEFAULT_WIDTH, thickness: float = 100.0,
                       n_obs: int = 100, noise: float = 0.01,
                       relative: bool = True) -> ToyMisfitHessian:
    """Toy Gauss-Newton data-misfit Hessian on ``n`` grid points.

    ``noise`` is a relative level applied to the noise-free data generated by
    the reference field when ``relative`` is true, otherwise an absolute
    standard deviation.
    """
    sm = SlabSmoother(n, width, thickness)
    obs = observation_indices(n, n_obs)
    if relative:
        clean = sm.apply(true_log_sliding(sm.x, width))[obs]
        std = noise * np.abs(clean)
    else:
        std = np.full(obs.size, float(noise))
    return ToyMisfitHessian(sm, obs, std)


def toy_misfit_hessian_2d(nx: int, ny: int, width: float = DEFAULT_WIDTH,
                          thickness: float = 100.0, obs_stride: int = 2):
    """2-D periodic analog of :func:`toy_misfit_hessian` in natural row-major order.

    Observations sit on every ``obs_stride``-th grid point in each direction
    with unit noise.  Returns ``(operator, points)`` with the grid
    coordinates of each degree of freedom.
    """
    hx, hy = width / nx, width / ny
    kx = (2.0 / hx) * np.abs(np.sin(np.pi * np.fft.fftfreq(nx)))
    ky = (2.0 / hy) * np.abs(np.sin(np.pi * np.fft.rfftfreq(ny)))
    kappa = np.sqrt(kx[:, None] ** 2 + ky[None, :] ** 2)
    symbol = 1.0 / np.cosh(np.minimum(thickness * kappa, 700.0))
    mask = np.zeros((nx, ny), dtype=bool)
    mask[::obs_stride, ::obs_stride] = True
    mask = mask.reshape(-1)

    def smooth(X):
        F = X.reshape(nx, ny, -1)
        G = np.fft.irfft2(symbol[:, :, None] * np.fft.rfft2(F, axes=(0, 1)), s=(nx, ny), axes=(0, 1))
        return G.reshape(nx * ny, -1)

    def matmat(X):
        Y = smooth(X)
        Y[~mask] = 0.0
        return smooth(Y)

    ix, iy = np.meshgrid(np.arange(nx) * hx, np.arange(ny) * hy, indexing="ij")
    points = np.column_stack([ix.reshape(-1), iy.reshape(-1)])
    return LinearOperator(nx * ny, matmat, name="toy-misfit-2d"), points


# -- prior -------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorOperator:
    """Gaussian prior with covariance ``M^{-1}``.

    ``M = hx * (delta I - gamma * Lap)`` is the lumped-mass finite-element
    discretization of ``delta I - gamma * Laplacian`` with periodic
    boundaries, so ``M^{-1}`` approximates nodal values of the covariance
    kernel of ``(delta I - gamma Laplacian)^{-1}``.
    """

    n: int
    width: float = DEFAULT_WIDTH
    gamma: float = 6.0e2
    delta: float = 2.4e-3
    mean: float = PRIOR_MEAN
    boundary: str = "periodic"

    def __post_init__(self):
        if self.boundary != "periodic":
            raise ValueError("only periodic boundaries are implemented")
        if self.n < 3 or self.gamma < 0 or self.delta <= 0:
            raise ValueError("invalid prior parameters")

    @property
    def spacing(self) -> float:
        return self.width / self.n

    @cached_property
    def precision(self) -> sp.csc_matrix:
        n, h = self.n, self.spacing
        main = np.full(n, self.delta + 2.0 * self.gamma / h**2)
        off = np.full(n, -self.gamma / h**2)
        M = sp.diags([main, off[:-1], off[:-1]], [0, 1, -1], shape=(n, n), format="lil")
        M[0, n - 1] += -self.gamma / h**2
        M[n - 1, 0] += -self.gamma / h**2
        return (h * M).tocsc()

    @cached_property
    def _lu(self):
        return spla.splu(self.precision)

    @cached_property
    def _eig(self):
        if self.n > SMALL_MATRIX_CAP:
            raise ValueError(f"dense prior square root limited to N <= {SMALL_MATRIX_CAP}")
        return sym_eig(self.precision.toarray())

    def mean_vector(self) -> np.ndarray:
        return np.full(self.n, self.mean)

    def precision_apply(self, X):
        return self.precision @ np.asarray(X, dtype=float)

    def cov_apply(self, X):
        X = np.asarray(X, dtype=float)
        return self._lu.solve(X)

    def sqrt_apply(self, X):
        lam, V = self._eig
        X = np.asarray(X, dtype=float)
        scale = lam ** -0.5
        if X.ndim == 1:
            return V @ (scale * (V.T @ X))
        return V @ (scale[:, None] * (V.T @ X))

    def dense_cov(self) -> np.ndarray:
        lam, V = self._eig
        return (V / lam) @ V.T

    def as_operator(self) -> LinearOperator:
        return LinearOperator(self.n, self.cov_apply, name="prior")


def prior_sqrt_apply(P: PriorOperator, X):
    """Symmetric square root of the prior covariance applied to ``X``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] != P.n:
        raise ValueError(f"expected {P.n} rows, got {X.shape}")
    return P.sqrt_apply(X)


def preconditioned_misfit(P: PriorOperator, Hm: LinearOperator) -> LinearOperator:
    """``Gamma^{1/2} Hm Gamma^{1/2}``; one apply of this is one apply of ``Hm``."""
    if P.n != Hm.n:
        raise ValueError(f"prior size {P.n} != misfit size {Hm.n}")
    return LinearOperator(Hm.n, lambda X: P.sqrt_apply(Hm.apply(P.sqrt_apply(X))),
                          name=f"preconditioned({Hm.name})")


# -- forward model and MAP point -----------------------------------------------------

class ForwardModel(Protocol):
    def value(self, beta: np.ndarray) -> np.ndarray: ...
    def jvp(self, beta: np.ndarray, v: np.ndarray) -> np.ndarray: ...
    def vjp(self, beta: np.ndarray, w: np.ndarray) -> np.ndarray: ...


class LinearToyForward:
    """``F(beta) = (S beta)[obs]``."""

    def __init__(self, smoother: SlabSmoother, obs: np.ndarray):
        self.smoother = smoother
        self.obs = np.asarray(obs)

    def value(self, beta):
        return self.smoother.apply(beta)[self.obs]

    def jvp(self, beta, v):
        return self.smoother.apply(v)[self.obs]

    def vjp(self, beta, w):
        z = np.zeros(self.smoother.n)
        z[self.obs] = w
        return self.smoother.apply(z)


@dataclass
class ToyProblem:
    forward: LinearToyForward
    prior: PriorOperator
    data: np.ndarray
    noise_std: np.ndarray
    beta_true: np.ndarray
    x: np.ndarray

    def misfit_hessian(self) -> ToyMisfitHessian:
        return ToyMisfitHessian(self.forward.smoother, self.forward.obs, self.noise_std)


def toy_problem(n: int = 512, width: float = DEFAULT_WIDTH, thickness: float = 100.0,
                n_obs: int = 100, rel_noise: float = 0.01, seed: int = 0,
                gamma: float = 6.0e2, delta: float = 2.4e-3) -> ToyProblem:
    """Synthetic linear inverse problem with the reference sliding field.

    With ``rel_noise == 0`` the data are noise free and unit weights are used.
    """
    sm = SlabSmoother(n, width, thickness)
    obs = observation_indices(n, n_obs)
    fwd = LinearToyForward(sm, obs)
    beta_true = true_log_sliding(sm.x, width)
    clean = fwd.value(beta_true)
    if rel_noise > 0:
        std = rel_noise * np.abs(clean)
        data = clean + std * RngStream(seed).normal(obs.size, 1)[:, 0]
    else:
        std = np.ones(obs.size)
        data = clean
    prior = PriorOperator(n, width, gamma, delta)
    return ToyProblem(fwd, prior, data, std, beta_true, sm.x)


class ConvergenceError(RuntimeError):
    pass


@dataclass
class MapResult:
    beta: np.ndarray
    iterations: int
    costs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)


def map_estimate(forward, prior: PriorOperator, data, noise_std, init=None,
                 tol: float = 1e-8, max_iters: int = 50, prior_mean=None,
                 armijo: float = 1e-4, min_step: float = 1e-12) -> MapResult:
    """MAP point by inexact Gauss-Newton-CG with Armijo backtracking.

    Minimizes ``0.5 ||F(b) - d||^2_{noise^-1} + 0.5 ||b - mean||^2_{M}`` where
    ``M`` is the prior precision.  Each Newton system is solved by CG
    preconditioned with the prior covariance, stopped at relative residual
    ``min(0.5, sqrt(||g|| / ||g_0||))``.  Stops when
    ``||g|| <= tol * ||g_0||``.
    """
    data = np.asarray(data, dtype=float)
    w = 1.0 / np.broadcast_to(np.asarray(noise_std, dtype=float), data.shape) ** 2
    mean = prior.mean_vector() if prior_mean is None else np.broadcast_to(prior_mean, (prior.n,)).astype(float)
    beta = mean.copy() if init is None else np.array(init, dtype=float)

    def cost(b):
        r = forward.value(b) - data
        db = b - mean
        return 0.5 * float(r @ (w * r)) + 0.5 * float(db @ prior.precision_apply(db)), r

    J, r = cost(beta)
    res = MapResult(beta, 0, [J])
    g0 = None
    for it in range(max_iters + 1):
        g = forward.vjp(beta, w * r) + prior.precision_apply(beta - mean)
        gn = float(np.linalg.norm(g))
        res.grad_norms.append(gn)
        if g0 is None:
            g0 = gn
        if gn <= tol * g0 or gn == 0.0:
            res.beta, res.iterations = beta, it
            return res
        if it == max_iters:
            break

        def hess(v, b=beta):
            return forward.vjp(b, w * forward.jvp(b, v)) + prior.precision_apply(v)

        H = spla.LinearOperator((prior.n, prior.n), matvec=hess, dtype=float)
        Pinv = spla.LinearOperator((prior.n, prior.n), matvec=prior.cov_apply, dtype=float)
        count = [0]
        p, _ = spla.cg(H, -g, rtol=min(0.5, np.sqrt(gn / g0)), atol=0.0, M=Pinv,
                       maxiter=10 * prior.n, callback=lambda _x: count.__setitem__(0, count[0] + 1))
        res.cg_iterations.append(count[0])
        slope = float(g @ p)
        if slope >= 0:
            raise ConvergenceError(f"iteration {it}: CG step is not a descent direction")
        step = 1.0
        while True:
            J_new, r_new = cost(beta + step * p)
            if J_new <= J + armijo * step * slope:
                break
            step *= 0.5
            if step < min_step:
                raise ConvergenceError(f"iteration {it}: line search failed")
        beta, J, r = beta + step * p, J_new, r_new
        res.costs.append(J)
    raise ConvergenceError(f"no convergence within {max_iters} Gauss-Newton iterations")


# -- config --------------------------------------------------------------------------

def operator_from_config(cfg: dict, base_dir: Path | str = ".") -> LinearOperator:
    """Build an operator from ``{"type": ..., **parameters}``.

    Types: ``toy-misfit`` (optionally ``"preconditioned": true``),
    ``toy-misfit-2d``, ``dense-mm`` (``"path"`` to a Matrix Market file),
    ``prior`` (the prior covariance).
    """
    kind = cfg.get("type")
    if kind == "toy-misfit":
        n = int(cfg["n"])
        width = float(cfg.get("width", DEFAULT_WIDTH))
        Hm = toy_misfit_hessian(n, width=width,
                                thickness=float(cfg.get("thickness", width / 100)),
                                n_obs=int(cfg.get("n_obs", min(100, n))),
                                noise=float(cfg.get("noise", 0.01)),
                                relative=bool(cfg.get("relative_noise", True)))
        if cfg.get("preconditioned", False):
            prior = PriorOperator(n, width, float(cfg.get("gamma", 6.0e2)), float(cfg.get("delta", 2.4e-3)))
            return preconditioned_misfit(prior, Hm)
        return Hm
    if kind == "toy-misfit-2d":
        op, _ = toy_misfit_hessian_2d(int(cfg["nx"]), int(cfg["ny"]),
                                      width=float(cfg.get("width", DEFAULT_WIDTH)),
                                      thickness=float(cfg.get("thickness", 100.0)),
                                      obs_stride=int(cfg.get("obs_stride", 2)))
        return op
    if kind == "dense-mm":
        path = Path(base_dir) / cfg["path"]
        return dense_operator(read_matrix_market(path))
    if kind == "prior":
        P = PriorOperator(int(cfg["n"]), float(cfg.get("width", DEFAULT_WIDTH)),
                          float(cfg.get("gamma", 6.0e2)), float(cfg.get("delta", 2.4e-3)))
        return P.as_operator()
    raise ValueError(f"unknown operator type {kind!r}")
