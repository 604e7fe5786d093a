"""Independent exact and brute-force solvers used to check the optimiser.

None of these share code paths with the learning rule: the quadrature and
particle routines work directly with ``exp(-C - R)``, and the conjugate
formula is the closed-form Gaussian posterior for quadratic costs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .blr import GradientEstimate
from .policy import GaussianPolicy, cholesky, chol_inverse, standard_normals

BatchFn = Callable[[NDArray], NDArray]


@dataclass(frozen=True)
class QuadratureGrid:
    bounds: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "counts", counts)
        if not 1 <= len(bounds) <= 2 or len(bounds) != len(counts):
            raise ValueError("quadrature supports 1 or 2 dimensions with one count per dimension")
        if any(not (np.isfinite(lo) and np.isfinite(hi) and hi > lo) for lo, hi in bounds):
            raise ValueError("grid bounds must be finite and increasing")
        if min(counts) < 16 or int(np.prod(counts)) > 10**6:
            raise ValueError("need >= 16 points per dimension and <= 1e6 points in total")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def axes(self) -> list[NDArray]:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.counts)]


class QuadratureResult(NamedTuple):
    Z: float
    log_Z: float
    J_B_star: float
    mean: NDArray
    cov: NDArray


class BoundaryMassError(ValueError):
    pass


def _trapezoid_weights(axis: NDArray) -> NDArray:
    w = np.full(axis.size, axis[1] - axis[0])
    w[0] = w[-1] = 0.5 * (axis[1] - axis[0])
    return w


def quadrature_posterior(
    cost: BatchFn,
    regulariser: BatchFn,
    grid: QuadratureGrid,
    tail_tol: float = 1e-8,
) -> QuadratureResult:
    """Normaliser, optimal objective ``-log Z`` and moments of ``exp(-C-R)/Z``."""
    axes = grid.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    weights = _trapezoid_weights(axes[0])
    boundary = np.zeros(mesh[0].shape, dtype=bool)
    boundary[[0, -1]] = True
    if grid.dim == 2:
        weights = np.outer(weights, _trapezoid_weights(axes[1]))
        boundary[:, [0, -1]] = True
    weights, boundary = weights.ravel(), boundary.ravel()

    energy = np.asarray(cost(points), dtype=float) + np.asarray(regulariser(points), dtype=float)
    log_terms = -energy + np.log(weights)
    log_z = float(logsumexp(log_terms))
    if not np.isfinite(log_z):
        raise BoundaryMassError("integrand is not finite on the grid")
    post = np.exp(log_terms - log_z)
    edge_mass = float(post[boundary].sum())
    if edge_mass >= tail_tol:
        raise BoundaryMassError(f"boundary carries {edge_mass:.3g} of the mass; widen the grid")
    mean = post @ points
    centred = points - mean
    cov = (post[:, None] * centred).T @ centred
    return QuadratureResult(float(np.exp(log_z)), log_z, -log_z, mean, cov)


@dataclass(frozen=True)
class ParticleEnsemble:
    particles: NDArray  # (M, d)
    weights: NDArray  # (M,)

    def __post_init__(self) -> None:
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (particles.shape[0],):
            raise ValueError("need one weight per particle")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_policy(cls, policy: GaussianPolicy, m: int, seed: int) -> ParticleEnsemble:
        z = standard_normals(m, policy.dim, seed)
        return cls(policy.mean + z @ policy.chol.T, np.full(m, 1.0 / m))

    @property
    def mean(self) -> NDArray:
        return self.weights @ self.particles

    @property
    def cov(self) -> NDArray:
        c = self.particles - self.mean
        return (self.weights[:, None] * c).T @ c

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def _normalise_log(log_w: NDArray) -> tuple[NDArray, float]:
    total = float(logsumexp(log_w))
    if not np.isfinite(total):
        raise FloatingPointError("all particle weights underflowed; rescale the cost")
    w = np.exp(log_w - total)
    return w / w.sum(), total


def particle_sequential_update(ensemble: ParticleEnsemble, cost: BatchFn) -> tuple[ParticleEnsemble, float]:
    """Reweight by ``exp(-C)``; also return ``-log Z_hat`` with ``Z_hat = sum w exp(-C)``."""
    c = np.asarray(cost(ensemble.particles), dtype=float)
    if np.all(np.isfinite(c)) and np.all(c == c[0]):
        # a constant cost cancels on normalisation
        return ensemble, float(c[0])
    with np.errstate(divide="ignore"):
        log_w = np.log(ensemble.weights) - c
    weights, log_z = _normalise_log(log_w)
    return ParticleEnsemble(ensemble.particles, weights), -log_z


def bootstrap_se(
    ensemble: ParticleEnsemble,
    cost: BatchFn,
    statistic: Callable[[ParticleEnsemble, float], NDArray],
    n_boot: int = 200,
    seed: int = 0,
) -> NDArray:
    """Bootstrap standard error of ``statistic(updated_ensemble, -log Z_hat)``.

    Each replicate resamples the prior particles with replacement (uniform
    prior weights assumed) and repeats the reweighting.
    """
    m = ensemble.particles.shape[0]
    c = np.asarray(cost(ensemble.particles), dtype=float)
    gen = np.random.Generator(np.random.Philox(key=seed))
    stats = []
    for _ in range(n_boot):
        idx = gen.integers(0, m, size=m)
        weights, log_z = _normalise_log(-c[idx])
        stats.append(np.atleast_1d(statistic(ParticleEnsemble(ensemble.particles[idx], weights), -log_z)))
    return np.std(np.asarray(stats), axis=0, ddof=1)


def analytic_quadratic_posterior(prior: GaussianPolicy, Q: ArrayLike, b: ArrayLike) -> GaussianPolicy:
    """Posterior of ``prior * exp(-(theta^T Q theta / 2 + b^T theta))``."""
    d = prior.dim
    Q = np.asarray(Q, dtype=float).reshape(d, d)
    b = np.asarray(b, dtype=float).reshape(d)
    prec_prior = prior.precision
    prec_chol = cholesky(prec_prior + Q)
    cov = chol_inverse(prec_chol)
    mean = cov @ (prec_prior @ prior.mean - b)
    return GaussianPolicy(mean, cholesky(cov))


def quadratic_gradients(policy: GaussianPolicy, Q: ArrayLike, b: ArrayLike) -> GradientEstimate:
    """Exact ``grad_m E = Q m + b`` and ``grad_S E = Q / 2`` for the quadratic cost."""
    Q = np.asarray(Q, dtype=float)
    return GradientEstimate.exact(Q @ policy.mean + np.asarray(b, dtype=float), 0.5 * Q)


def coordinate_descent(
    cost: BatchFn,
    theta0: ArrayLike,
    radius: float = 1.0,
    sweeps: int = 30,
    points: int = 33,
    refinements: int = 5,
    tol: float = 1e-10,
    lower: ArrayLike | None = None,
    upper: ArrayLike | None = None,
) -> tuple[NDArray, float]:
    """Minimise a batch cost one coordinate at a time by nested grid search.

    Each coordinate is searched on ``points`` values within ``radius`` of its
    current value, then the window shrinks around the best value
    ``refinements`` times. Stops when a sweep improves the cost by < ``tol``.
    """
    theta = np.array(theta0, dtype=float)
    d = theta.size
    lo = np.full(d, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), (d,))
    hi = np.full(d, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), (d,))
    best = float(cost(theta[None])[0])
    offsets = np.linspace(-1.0, 1.0, points)
    for _ in range(sweeps):
        start = best
        for i in range(d):
            r = radius
            for _ in range(refinements):
                cand = np.clip(theta[i] + r * offsets, lo[i], hi[i])
                trial = np.repeat(theta[None], points, axis=0)
                trial[:, i] = cand
                c = np.asarray(cost(trial), dtype=float)
                c[~np.isfinite(c)] = np.inf
                j = int(np.argmin(c))
                if c[j] < best:
                    best, theta[i] = float(c[j]), cand[j]
                r *= 4.0 / (points - 1)
        if start - best < tol:
            break
    return theta, best


class ReferenceLoop(NamedTuple):
    times: NDArray
    states: NDArray
    controls: NDArray
    plans: list[NDArray]
    costs: list[float]


def receding_horizon_reference(
    plan_cost: Callable[[NDArray, NDArray, float], NDArray],
    execute: Callable[[NDArray, NDArray, float], tuple[NDArray, NDArray, NDArray]],
    x0: ArrayLike,
    dim: int,
    rounds: int,
    shift: int,
    n_control: int,
    period: float,
    **search,
) -> ReferenceLoop:
    """Closed loop driven by deterministic coordinate-descent plans.

    ``plan_cost(thetas, x, t0)`` scores knot vectors for the window starting at
    ``t0``; ``execute(theta, x, t0)`` applies the leading knots of the plan and
    returns ``(times, states, controls)`` of the executed segment. Each plan is
    warm-started from the previous one moved ``shift`` knots earlier, with the
    last knot repeated.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    theta = np.zeros(dim)
    times, states, controls = [0.0], [x.copy()], []
    plans, costs = [], []
    for j in range(rounds):
        t0 = j * period
        if j:
            theta = np.concatenate([theta[shift * n_control:], np.tile(theta[-n_control:], shift)])
        theta, best = coordinate_descent(lambda th: plan_cost(th, x, t0), theta, **search)
        plans.append(theta.copy())
        costs.append(best)
        seg_t, seg_x, seg_u = execute(theta, x, t0)
        times.extend(seg_t[1:].tolist())
        states.extend(seg_x[1:])
        controls.extend(seg_u)
        x = seg_x[-1].copy()
    return ReferenceLoop(np.array(times), np.array(states), np.array(controls), plans, costs)
