"""Monte-Carlo gradients of the expected cost and the natural-gradient update.

The update on natural parameters is

    eta_{k+1} = (1 - gamma) eta_k - gamma (grad_mu E - eta_prior)

and its Gaussian form updates precision and mean directly. Gradients with
respect to the mean parameters come from gradients with respect to
``(m, S)`` by the chain rule ``grad_mu1 = grad_m - 2 grad_S m``,
``grad_mu2 = grad_S``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_solve

from .errors import NotPositiveDefinite, StepRejected
from .policy import GaussianPolicy, NaturalParams, chol_inverse, cholesky

log = logging.getLogger(__name__)

BatchCost = Callable[[NDArray], NDArray]
GradMu = tuple[NDArray, NDArray]


class EstimatorKind(str, enum.Enum):
    BONNET_PRICE_FD = "bonnet_price_fd"
    SCORE_FUNCTION = "score_function"
    GAUSS_NEWTON = "gauss_newton"


class SampleSet(Protocol):
    thetas: NDArray
    costs: NDArray
    diverged: NDArray


class Samples(NamedTuple):
    thetas: NDArray
    costs: NDArray
    diverged: NDArray


@dataclass(frozen=True)
class GradientEstimate:
    """Estimates of ``grad_m E`` and ``grad_S E`` with per-entry standard errors.

    ``se_mu1`` is the standard error of the chain-ruled ``grad_mu1`` computed
    from per-sample terms, so it accounts for the correlation between the two
    parts. ``kind`` is None for exact (analytic) gradients.
    """

    grad_m: NDArray
    grad_sigma: NDArray
    n_samples: int
    se_m: NDArray
    se_sigma: NDArray
    se_mu1: NDArray
    kind: EstimatorKind | None = None
    n_flagged: int = 0

    @property
    def noise_floor(self) -> float:
        """Norm of the standard errors of the stacked ``(grad_mu1, grad_mu2)``."""
        return float(np.sqrt(np.sum(self.se_mu1**2) + np.sum(self.se_sigma**2)))

    @classmethod
    def exact(cls, grad_m: ArrayLike, grad_sigma: ArrayLike) -> GradientEstimate:
        grad_m = np.asarray(grad_m, dtype=float)
        grad_sigma = np.asarray(grad_sigma, dtype=float)
        grad_sigma = 0.5 * (grad_sigma + grad_sigma.T)
        zeros_m, zeros_s = np.zeros_like(grad_m), np.zeros_like(grad_sigma)
        return cls(grad_m, grad_sigma, 0, zeros_m, zeros_s, zeros_m)


@dataclass(frozen=True)
class LearningRateSchedule:
    gamma0: float = 1.0
    decay: str = "harmonic"

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma0 <= 1.0:
            raise ValueError(f"gamma0={self.gamma0} must lie in (0, 1]")
        if self.decay not in ("constant", "harmonic"):
            raise ValueError(f"unknown decay rule {self.decay!r}")

    def __call__(self, k: int) -> float:
        if self.decay == "constant":
            return self.gamma0
        return self.gamma0 / (1.0 + k)


def _fd_steps(thetas: NDArray, step: float) -> NDArray:
    return step * np.maximum(1.0, np.abs(thetas))


def fd_gradients(thetas: NDArray, cost_eval: BatchCost, step: float = 1e-4) -> NDArray:
    """Central-difference gradients for each row of ``thetas``.

    ``cost_eval`` maps an ``(B, d)`` array to ``(B,)`` costs; non-finite costs
    mark failed probes. Components with a failed probe are returned as NaN.
    """
    if not step > 0.0:
        raise ValueError("finite-difference step must be positive")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n, d = thetas.shape
    h = _fd_steps(thetas, step)
    eye = np.eye(d)
    plus = thetas[:, None, :] + h[:, :, None] * eye[None]
    minus = thetas[:, None, :] - h[:, :, None] * eye[None]
    probes = np.concatenate([plus, minus], axis=1).reshape(n * 2 * d, d)
    c = np.asarray(cost_eval(probes), dtype=float).reshape(n, 2, d)
    with np.errstate(invalid="ignore"):
        g = (c[:, 0] - c[:, 1]) / (2.0 * h)
    g[~np.isfinite(g)] = np.nan
    return g


def per_sample_gradient(theta: ArrayLike, cost_eval: BatchCost, step: float = 1e-4) -> NDArray:
    """Central finite-difference gradient of a (batch) cost at one point."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return fd_gradients(theta[None, :], cost_eval, step)[0]


def _mean_se(terms: NDArray) -> tuple[NDArray, NDArray]:
    # nan-aware mean and standard error over axis 0
    valid = np.isfinite(terms)
    count = valid.sum(axis=0)
    if np.any(count == 0):
        raise ValueError("every sample is flagged for at least one gradient component")
    filled = np.where(valid, terms, 0.0)
    mean = filled.sum(axis=0) / count
    dev = np.where(valid, terms - mean, 0.0)
    var = (dev**2).sum(axis=0) / np.maximum(count - 1, 1)
    return mean, np.sqrt(var / count)


def _sym_batch(a: NDArray) -> NDArray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def estimate_gradients(
    batch: SampleSet,
    policy: GaussianPolicy,
    kind: EstimatorKind | str = EstimatorKind.BONNET_PRICE_FD,
    cost_eval: BatchCost | None = None,
    fd_step: float = 1e-4,
) -> GradientEstimate:
    """Estimate ``grad_m E`` and ``grad_S E`` from draws of ``policy``.

    BONNET_PRICE_FD averages finite-difference gradients for ``grad_m`` and,
    for ``grad_S``, half the mean of the Stein-type Hessian estimate
    ``sym(S^-1 (theta - m) (g - g_bar)^T)``, which needs no second differences.
    GAUSS_NEWTON replaces that Hessian with ``g g^T``. SCORE_FUNCTION uses only
    the sampled costs, centred on their mean.
    """
    kind = EstimatorKind(kind)
    thetas = np.atleast_2d(np.asarray(batch.thetas, dtype=float))
    n, d = thetas.shape
    if n == 0:
        raise ValueError("cannot estimate gradients from an empty batch")
    if d != policy.dim:
        raise ValueError(f"samples have dim {d}, policy has dim {policy.dim}")
    prec = policy.precision
    white = (thetas - policy.mean) @ prec  # rows: S^-1 (theta_i - m)
    n_flagged = 0

    if kind is EstimatorKind.SCORE_FUNCTION:
        costs = np.asarray(batch.costs, dtype=float)
        if not np.all(np.isfinite(costs)):
            raise ValueError("score-function estimator needs finite costs")
        # shifted mean keeps constant costs exactly at zero after centring
        base = costs[0] + float(np.mean(costs - costs[0]))
        centred = costs - base
        m_terms = centred[:, None] * white
        s_terms = 0.5 * centred[:, None, None] * (white[:, :, None] * white[:, None, :] - prec[None])
    else:
        if cost_eval is None:
            raise ValueError(f"{kind.value} needs a cost_eval for per-sample gradients")
        g = fd_gradients(thetas, cost_eval, fd_step)
        n_flagged = int(np.sum(~np.isfinite(g)))
        if kind is EstimatorKind.GAUSS_NEWTON:
            hess = g[:, :, None] * g[:, None, :]
        else:
            # centring g is a control variate: E[S^-1 (theta - m)] = 0
            g_bar, _ = _mean_se(g)
            hess = _sym_batch(white[:, :, None] * (g - g_bar)[:, None, :])
        m_terms = g
        s_terms = 0.5 * hess

    mu1_terms = m_terms - 2.0 * np.einsum("nij,j->ni", s_terms, policy.mean)
    grad_m, se_m = _mean_se(m_terms)
    grad_s, se_s = _mean_se(s_terms)
    _, se_mu1 = _mean_se(mu1_terms)
    grad_s = 0.5 * (grad_s + grad_s.T)
    se_s = 0.5 * (se_s + se_s.T)
    return GradientEstimate(grad_m, grad_s, n, se_m, se_s, se_mu1, kind, n_flagged)


def chain_rule_grads(est: GradientEstimate, m: ArrayLike) -> GradMu:
    """Gradients with respect to the mean parameters ``(mu1, mu2)``."""
    m = np.asarray(m, dtype=float)
    if m.shape != est.grad_m.shape:
        raise ValueError("mean and gradient dimensions differ")
    return est.grad_m - 2.0 * est.grad_sigma @ m, est.grad_sigma.copy()


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"learning rate {gamma} must lie in (0, 1]")


def gaussian_blr_step(
    current: GaussianPolicy,
    prior: GaussianPolicy,
    est: GradientEstimate,
    gamma: float,
) -> GaussianPolicy:
    """One update of precision and mean in ``(m, S)`` form."""
    _check_gamma(gamma)
    prec_k, prec_j = current.precision, prior.precision
    prec_new = (1.0 - gamma) * prec_k + gamma * (2.0 * est.grad_sigma + prec_j)
    try:
        prec_chol = cholesky(prec_new)
    except NotPositiveDefinite as exc:
        raise StepRejected(f"updated precision is not positive definite ({exc})") from None
    direction = est.grad_m + prec_j @ (current.mean - prior.mean)
    mean_new = current.mean - gamma * cho_solve((prec_chol, True), direction)
    return GaussianPolicy(mean_new, cholesky(chol_inverse(prec_chol)))


def _check_valid(eta: NaturalParams) -> NaturalParams:
    try:
        cholesky(-2.0 * eta.eta2)
    except NotPositiveDefinite as exc:
        raise StepRejected(f"eta2 left the negative-definite cone ({exc})") from None
    return eta


def natural_blr_step(
    eta_k: NaturalParams,
    eta_prior: NaturalParams,
    grad_mu: GradMu,
    gamma: float,
) -> NaturalParams:
    """``(1 - gamma) eta_k - gamma (grad_mu - eta_prior)``, evaluated as an increment on ``eta_k``.

    The increment form leaves ``eta_k`` bit-for-bit unchanged when it already
    satisfies ``eta_k = eta_prior - grad_mu``.
    """
    _check_gamma(gamma)
    g1, g2 = grad_mu
    eta1 = eta_k.eta1 - gamma * (eta_k.eta1 + g1 - eta_prior.eta1)
    eta2 = eta_k.eta2 - gamma * (eta_k.eta2 + g2 - eta_prior.eta2)
    return _check_valid(NaturalParams(eta1, eta2))


def optimality_residual(eta: NaturalParams, eta_prior: NaturalParams, grad_mu: GradMu) -> float:
    """``|| eta - (eta_prior - grad_mu E) ||`` over the stacked components."""
    g1, g2 = grad_mu
    r1 = eta.eta1 - (eta_prior.eta1 - g1)
    r2 = eta.eta2 - (eta_prior.eta2 - g2)
    return float(np.sqrt(np.sum(r1**2) + np.sum(r2**2)))


def log_objective_step(
    eta_k: NaturalParams,
    eta_prior: NaturalParams,
    grad_mu: GradMu,
    gamma: float,
    objective: float,
) -> tuple[NaturalParams, bool]:
    """Natural step on ``log J_B``: the step is divided by the current objective.

    Returns ``(eta, fallback)``; a non-positive objective cannot be logged, so
    the unscaled step is taken and ``fallback`` is True.
    """
    _check_gamma(gamma)
    if not (np.isfinite(objective) and objective > 0.0):
        log.info("objective %.6g is not positive; taking the unscaled step", objective)
        return natural_blr_step(eta_k, eta_prior, grad_mu, gamma), True
    g1, g2 = grad_mu
    rate = gamma / objective
    eta1 = eta_k.eta1 - rate * (eta_k.eta1 + g1 - eta_prior.eta1)
    eta2 = eta_k.eta2 - rate * (eta_k.eta2 + g2 - eta_prior.eta2)
    return _check_valid(NaturalParams(eta1, eta2)), False


def step_with_retry(
    step: Callable[[float], NaturalParams],
    gamma: float,
    max_halvings: int = 10,
) -> tuple[NaturalParams, float, int]:
    """Call ``step(gamma)``, halving gamma after each rejection.

    Returns ``(eta, gamma_used, halvings)``; re-raises after ``max_halvings``.
    """
    for halvings in range(max_halvings + 1):
        try:
            return step(gamma), gamma, halvings
        except StepRejected:
            if halvings == max_halvings:
                raise
            log.debug("step rejected at gamma=%.3g; halving", gamma)
            gamma *= 0.5
    raise AssertionError("unreachable")
