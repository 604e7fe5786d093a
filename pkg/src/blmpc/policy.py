"""Gaussian policy as a minimal exponential family.

The policy is ``N(m, S)`` over the flattened control-knot vector. Natural
parameters are ``(S^-1 m, -S^-1 / 2)`` and expectation parameters are
``(m, S + m m^T)``. Matrix-valued parameters pair with the Frobenius inner
product and the carrier measure is ``(2 pi)^(-d/2)``, which makes the
log-partition function coincide with the usual Gaussian normaliser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_solve, solve_triangular

from .errors import NotPositiveDefinite

_LOG_2PI = float(np.log(2.0 * np.pi))


def _sym(a: NDArray) -> NDArray:
    return 0.5 * (a + a.T)


def cholesky(a: ArrayLike) -> NDArray:
    """Lower Cholesky factor of the symmetric part of ``a``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        chol = np.linalg.cholesky(_sym(a))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(chol) > 0.0):
        raise NotPositiveDefinite("Cholesky factor has a non-positive diagonal")
    return chol


def chol_inverse(chol: NDArray) -> NDArray:
    """``(L L^T)^-1`` from triangular solves plus one refinement step.

    The refinement residual is formed in extended precision; without it the
    natural/moment round trip loses about ``cond * eps`` in each direction.
    """
    n = chol.shape[0]
    linv = solve_triangular(chol, np.eye(n), lower=True)
    inv = linv.T @ linv
    cl = chol.astype(np.longdouble)
    resid = np.eye(n, dtype=np.longdouble) - cl @ (cl.T @ inv.astype(np.longdouble))
    inv = inv + (inv.astype(np.longdouble) @ resid).astype(float)
    return _sym(inv)


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianPolicy:
    """``N(mean, chol @ chol.T)`` with the covariance held as its Cholesky factor."""

    mean: NDArray
    chol: NDArray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        chol = np.atleast_2d(np.asarray(self.chol, dtype=float))
        if mean.ndim != 1 or mean.size < 1:
            raise ValueError("mean must be a non-empty vector")
        if chol.shape != (mean.size, mean.size):
            raise ValueError(f"chol shape {chol.shape} does not match mean dim {mean.size}")
        if not np.allclose(chol, np.tril(chol), rtol=0.0, atol=0.0):
            raise ValueError("chol must be lower triangular")
        if not np.all(np.diag(chol) > 0.0) or not np.all(np.isfinite(chol)):
            raise NotPositiveDefinite("covariance factor must have a strictly positive diagonal")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "chol", _frozen(chol))

    @classmethod
    def from_cov(cls, mean: ArrayLike, cov: ArrayLike) -> GaussianPolicy:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls(mean, cholesky(cov))

    @classmethod
    def isotropic(cls, mean: ArrayLike, var: float) -> GaussianPolicy:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, np.sqrt(var) * np.eye(mean.size))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> NDArray:
        return _sym(self.chol @ self.chol.T)

    @property
    def precision(self) -> NDArray:
        return chol_inverse(self.chol)

    def logdet_cov(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


@dataclass(frozen=True)
class NaturalParams:
    """``eta1 = S^-1 m`` and ``eta2 = -S^-1 / 2`` (full symmetric matrix)."""

    eta1: NDArray
    eta2: NDArray

    def __post_init__(self) -> None:
        eta1 = np.atleast_1d(np.asarray(self.eta1, dtype=float))
        eta2 = np.atleast_2d(np.asarray(self.eta2, dtype=float))
        if eta2.shape != (eta1.size, eta1.size):
            raise ValueError(f"eta2 shape {eta2.shape} does not match eta1 dim {eta1.size}")
        object.__setattr__(self, "eta1", _frozen(eta1))
        object.__setattr__(self, "eta2", _frozen(_sym(eta2)))

    @property
    def dim(self) -> int:
        return self.eta1.size

    def flat(self) -> NDArray:
        return np.concatenate([self.eta1, self.eta2.ravel()])

    def __add__(self, other: NaturalParams) -> NaturalParams:
        return NaturalParams(self.eta1 + other.eta1, self.eta2 + other.eta2)

    def __sub__(self, other: NaturalParams) -> NaturalParams:
        return NaturalParams(self.eta1 - other.eta1, self.eta2 - other.eta2)

    def scale(self, c: float) -> NaturalParams:
        return NaturalParams(c * self.eta1, c * self.eta2)


@dataclass(frozen=True)
class ExpectationParams:
    """``mu1 = E[theta]`` and ``mu2 = E[theta theta^T]``."""

    mu1: NDArray
    mu2: NDArray

    def __post_init__(self) -> None:
        mu1 = np.atleast_1d(np.asarray(self.mu1, dtype=float))
        mu2 = np.atleast_2d(np.asarray(self.mu2, dtype=float))
        if mu2.shape != (mu1.size, mu1.size):
            raise ValueError(f"mu2 shape {mu2.shape} does not match mu1 dim {mu1.size}")
        object.__setattr__(self, "mu1", _frozen(mu1))
        object.__setattr__(self, "mu2", _frozen(_sym(mu2)))

    def flat(self) -> NDArray:
        return np.concatenate([self.mu1, self.mu2.ravel()])


def to_natural(policy: GaussianPolicy) -> NaturalParams:
    prec = policy.precision
    eta1 = cho_solve((policy.chol, True), policy.mean)
    return NaturalParams(eta1, -0.5 * prec)


def to_expectation(policy: GaussianPolicy) -> ExpectationParams:
    m = policy.mean
    return ExpectationParams(m, policy.cov + np.outer(m, m))


def from_natural(eta: NaturalParams) -> GaussianPolicy:
    """Invert the natural map; fails with NotPositiveDefinite unless eta2 < 0."""
    prec_chol = cholesky(-2.0 * eta.eta2)
    cov = chol_inverse(prec_chol)
    mean = cho_solve((prec_chol, True), eta.eta1)
    return GaussianPolicy(mean, cholesky(cov))


def from_expectation(mu: ExpectationParams) -> GaussianPolicy:
    cov = mu.mu2 - np.outer(mu.mu1, mu.mu1)
    return GaussianPolicy(mu.mu1, cholesky(cov))


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must lie in [0, 2**64)")
    return seed


def standard_normals(n: int, d: int, seed: int, start: int = 0) -> NDArray:
    """Rows ``start .. start+n-1`` of a counter-based standard-normal table.

    Row ``i`` comes from a Philox stream keyed by ``(seed, i)``, so any row can
    be regenerated on its own and the table does not depend on evaluation order.
    """
    seed = _check_seed(seed)
    if n < 0 or d < 1:
        raise ValueError("need n >= 0 and d >= 1")
    out = np.empty((n, d))
    for row, i in enumerate(range(start, start + n)):
        gen = np.random.Generator(np.random.Philox(key=(seed << 64) | i))
        out[row] = gen.standard_normal(d)
    return out


def sample(policy: GaussianPolicy, n: int, seed: int, start: int = 0) -> NDArray:
    """Draw ``n`` parameter vectors ``m + L z`` as an ``(n, d)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = standard_normals(n, policy.dim, seed, start)
    return policy.mean + z @ policy.chol.T


def _check_theta(policy: GaussianPolicy, theta: ArrayLike) -> NDArray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (policy.dim,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({policy.dim},)")
    return theta


def log_density(policy: GaussianPolicy, theta: ArrayLike) -> float:
    theta = _check_theta(policy, theta)
    z = solve_triangular(policy.chol, theta - policy.mean, lower=True)
    return float(-0.5 * z @ z - 0.5 * policy.dim * _LOG_2PI - 0.5 * policy.logdet_cov())


def log_density_expfam(policy: GaussianPolicy, theta: ArrayLike) -> float:
    """Same value as :func:`log_density`, via <eta, T(theta)> - A(eta) + log rho."""
    theta = _check_theta(policy, theta)
    eta = to_natural(policy)
    inner = eta.eta1 @ theta + np.sum(eta.eta2 * np.outer(theta, theta))
    return float(inner - log_partition(eta) - 0.5 * policy.dim * _LOG_2PI)


def log_partition(eta: NaturalParams) -> float:
    """``A(eta) = m^T S^-1 m / 2 + log det S / 2`` for the (2 pi)^(-d/2) carrier."""
    prec_chol = cholesky(-2.0 * eta.eta2)
    w = solve_triangular(prec_chol, eta.eta1, lower=True)
    logdet_prec = 2.0 * float(np.sum(np.log(np.diag(prec_chol))))
    return float(0.5 * w @ w - 0.5 * logdet_prec)


def kl_divergence(q1: GaussianPolicy, q2: GaussianPolicy) -> float:
    """``KL(q1 || q2)`` in closed form."""
    if q1.dim != q2.dim:
        raise ValueError(f"dimension mismatch: {q1.dim} vs {q2.dim}")
    m = solve_triangular(q2.chol, q1.chol, lower=True)
    z = solve_triangular(q2.chol, q2.mean - q1.mean, lower=True)
    trace = float(np.sum(m * m))
    kl = 0.5 * (trace + float(z @ z) - q1.dim + q2.logdet_cov() - q1.logdet_cov())
    return max(kl, 0.0)


def _inner(eta: NaturalParams, mu: ExpectationParams) -> float:
    return float(eta.eta1 @ mu.mu1 + np.sum(eta.eta2 * mu.mu2))


def bregman_a_star(mu1: ExpectationParams, mu2: ExpectationParams) -> float:
    """Bregman divergence of the convex conjugate ``A*`` between two mean points.

    Evaluated as ``A(eta2) - A(eta1) - <eta2 - eta1, mu1>``, i.e. through the
    log-partition function and the mean-to-natural map, without the Gaussian
    KL formula.
    """
    eta_a = to_natural(from_expectation(mu1))
    eta_b = to_natural(from_expectation(mu2))
    return log_partition(eta_b) - log_partition(eta_a) - _inner(eta_b - eta_a, mu1)


def entropy(policy: GaussianPolicy) -> float:
    return 0.5 * (policy.dim * (_LOG_2PI + 1.0) + policy.logdet_cov())
