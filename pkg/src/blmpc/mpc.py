"""Planning rounds and the receding-horizon loop.

A round starts from the (optionally shifted) previous posterior and repeats
sample -> simulate -> estimate gradient -> natural-gradient step until the
relative change in natural parameters drops below ``tol`` or ``max_iters``
is reached. By default the KL term is anchored to the shifted previous
posterior (``anchor="shifted"``), so the prior lives on the same time grid as
the plan; ``anchor="previous"`` anchors to ``eta_prior`` exactly as passed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import blr
from .blr import (
    EstimatorKind,
    GradientEstimate,
    LearningRateSchedule,
    Samples,
    estimate_gradients,
    log_objective_step,
    natural_blr_step,
    optimality_residual,
    step_with_retry,
)
from .cost import CostSpec, expected_cost
from .errors import ConfigError, RolloutDivergence
from .policy import GaussianPolicy, NaturalParams, from_natural, kl_divergence, sample, to_natural
from .rollout import ControlParameterization, DynamicsModel, integrate, rollout_costs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcConfig:
    horizon: float = 2.0
    knots: int = 10
    steps: int = 50
    samples: int = 256
    max_iters: int = 50
    tol: float = 1e-6
    schedule: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    shift: int = 1
    seed: int = 0
    cov_floor: float = 1e-6
    injected_var: float = 1.0
    rounds: int = 20
    estimator: EstimatorKind = EstimatorKind.BONNET_PRICE_FD
    fd_step: float = 1e-4
    step_rule: str = "natural"
    warm_start: str = "shift"
    anchor: str = "shifted"
    max_halvings: int = 10
    threads: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "estimator", EstimatorKind(self.estimator))
        problems = []
        if self.horizon <= 0.0:
            problems.append("horizon must be positive")
        if self.knots < 1:
            problems.append("knots must be >= 1")
        elif self.steps < 1 or self.steps % self.knots:
            problems.append(f"steps={self.steps} must be a positive multiple of knots={self.knots}")
        if not 1 <= self.shift <= self.knots:
            problems.append(f"shift={self.shift} must lie in [1, knots={self.knots}]")
        if self.samples < 2:
            problems.append("samples must be >= 2")
        if self.max_iters < 1 or self.rounds < 1:
            problems.append("max_iters and rounds must be >= 1")
        if self.cov_floor <= 0.0 or self.injected_var <= 0.0:
            problems.append("cov_floor and injected_var must be positive")
        if self.step_rule not in ("natural", "log_objective"):
            problems.append(f"unknown step_rule {self.step_rule!r}")
        if self.anchor not in ("previous", "shifted"):
            problems.append(f"unknown anchor {self.anchor!r}")
        if self.warm_start not in ("shift", "identity"):
            problems.append(f"unknown warm_start {self.warm_start!r}")
        if not 0 <= self.seed < 2**63:
            problems.append("seed must lie in [0, 2**63)")
        if self.threads < 1:
            problems.append("threads must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def replan_period(self) -> float:
        return self.horizon / self.knots * self.shift

    @property
    def exec_steps(self) -> int:
        return self.steps // self.knots * self.shift


class Problem(Protocol):
    """Cost of knot vectors for a planning window starting at ``t0`` from ``x_t``.

    ``sample_costs`` returns ``(costs, diverged)`` with diverged draws already
    carrying the penalty cost; ``probe_costs`` returns NaN for diverged draws
    so finite-difference components through them are dropped.
    """

    dim: int

    def sample_costs(self, thetas: NDArray, x_t: NDArray, t0: float) -> tuple[NDArray, NDArray]: ...

    def probe_costs(self, thetas: NDArray, x_t: NDArray, t0: float) -> NDArray: ...


@dataclass
class RolloutProblem:
    model: DynamicsModel
    cost: CostSpec
    param: ControlParameterization
    steps: int
    threads: int = 1

    @property
    def dim(self) -> int:
        return self.param.dim

    def sample_costs(self, thetas, x_t, t0):
        return rollout_costs(self.model, x_t, self.param.shifted(t0), thetas, self.cost, self.steps, self.threads)

    def probe_costs(self, thetas, x_t, t0):
        c, bad = self.sample_costs(thetas, x_t, t0)
        c[bad] = np.nan
        return c


@dataclass
class ThetaCostProblem:
    """Cost that depends on the knot vector only (no simulation)."""

    fn: Callable[[NDArray], NDArray]
    dim: int
    divergence_penalty: float = 1e6

    def sample_costs(self, thetas, x_t, t0):
        c = np.asarray(self.fn(np.atleast_2d(thetas)), dtype=float)
        bad = ~np.isfinite(c)
        c = np.where(bad, self.divergence_penalty, c)
        return c, bad

    def probe_costs(self, thetas, x_t, t0):
        c = np.asarray(self.fn(np.atleast_2d(thetas)), dtype=float)
        return np.where(np.isfinite(c), c, np.nan)


GradientFn = Callable[[GaussianPolicy], GradientEstimate]


@dataclass
class RoundResult:
    posterior: NaturalParams
    policy: GaussianPolicy
    t0: float
    planned: NDArray  # (K, m) clamped mean knots
    executed: NDArray  # (shift, m)
    iterations: int
    residual: float
    noise_floor: float
    objective_trace: list[float]
    gamma_trace: list[float]
    divergence_fraction: float
    quality_warning: bool
    wall_time: float


def iteration_seed(seed: int, round_index: int, k: int) -> int:
    """64-bit key for the draws of iteration ``k`` in round ``round_index``."""
    return int(np.random.SeedSequence([seed, round_index, k]).generate_state(1, dtype=np.uint64)[0])


def warm_start_shift(
    eta_prev: NaturalParams,
    shift: int,
    n_control: int,
    injected_var: float,
) -> NaturalParams:
    """Move knot blocks ``shift`` places earlier and refill the tail.

    Vacated mean blocks repeat the last knot; vacated covariance blocks get
    ``injected_var * I`` on the diagonal and zeros elsewhere.
    """
    d = eta_prev.dim
    if d % n_control:
        raise ValueError("parameter dimension is not a multiple of n_control")
    knots = d // n_control
    if not 1 <= shift <= knots:
        raise ValueError(f"shift={shift} must lie in [1, {knots}]")
    prev = from_natural(eta_prev)
    m, cov = prev.mean, prev.cov
    keep = (knots - shift) * n_control
    off = shift * n_control
    m_new = np.empty(d)
    m_new[:keep] = m[off:]
    m_new[keep:] = np.tile(m[-n_control:], shift)
    cov_new = np.zeros((d, d))
    cov_new[:keep, :keep] = cov[off:, off:]
    cov_new[keep:, keep:] = injected_var * np.eye(d - keep)
    return to_natural(GaussianPolicy.from_cov(m_new, cov_new))


def floor_covariance(policy: GaussianPolicy, floor: float) -> GaussianPolicy:
    """Raise covariance eigenvalues below ``floor``; returns ``policy`` if none are."""
    vals, vecs = np.linalg.eigh(policy.cov)
    # slack: eigenvalues of an already floored matrix come back a few ulps low
    if vals.min() >= floor * (1.0 - 1e-9):
        return policy
    cov = (vecs * np.maximum(vals, floor)) @ vecs.T
    return GaussianPolicy.from_cov(policy.mean, cov)


def _relative_change(new: NaturalParams, old: NaturalParams) -> float:
    a, b = new.flat(), old.flat()
    return float(np.linalg.norm(a - b) / (1.0 + np.linalg.norm(b)))


def plan_round(
    config: MpcConfig,
    x_t: ArrayLike,
    problem: Problem,
    eta_prior: NaturalParams,
    t0: float = 0.0,
    n_control: int = 1,
    lower: ArrayLike | None = None,
    upper: ArrayLike | None = None,
    warm_start: bool = True,
    round_index: int = 0,
    gradient_fn: GradientFn | None = None,
) -> RoundResult:
    """One planning round of the Bayesian-learning MPC loop.

    ``gradient_fn`` replaces the Monte-Carlo estimator (e.g. exact gradients
    for quadratic costs); sampling still runs so the objective trace exists.
    """
    started = time.perf_counter()
    x_t = np.asarray(x_t, dtype=float)
    if eta_prior.dim != problem.dim:
        raise ValueError(f"prior has dim {eta_prior.dim}, problem has dim {problem.dim}")
    if warm_start and config.warm_start == "shift":
        eta = warm_start_shift(eta_prior, config.shift, n_control, config.injected_var)
        if config.anchor == "shifted":
            eta_prior = eta
    else:
        eta = eta_prior
    prior = from_natural(eta_prior)

    def evaluate(eta_k: NaturalParams, k: int):
        policy = from_natural(eta_k)
        thetas = sample(policy, config.samples, iteration_seed(config.seed, round_index, k))
        costs, bad = problem.sample_costs(thetas, x_t, t0)
        if gradient_fn is not None:
            est = gradient_fn(policy)
        else:
            est = estimate_gradients(
                Samples(thetas, costs, bad),
                policy,
                config.estimator,
                cost_eval=lambda th: problem.probe_costs(th, x_t, t0),
                fd_step=config.fd_step,
            )
        objective = expected_cost(costs) + kl_divergence(policy, prior)
        return policy, est, objective, float(np.mean(bad))

    trace: list[float] = []
    gammas: list[float] = []
    worst_div = 0.0
    iterations = 0
    for k in range(config.max_iters):
        policy, est, objective, div = evaluate(eta, k)
        worst_div = max(worst_div, div)
        trace.append(objective)
        grad_mu = blr.chain_rule_grads(est, policy.mean)
        current = eta
        if config.step_rule == "log_objective":
            step = lambda g: log_objective_step(current, eta_prior, grad_mu, g, objective)[0]  # noqa: E731
        else:
            step = lambda g: natural_blr_step(current, eta_prior, grad_mu, g)  # noqa: E731
        eta, gamma, _ = step_with_retry(step, config.schedule(k), config.max_halvings)
        gammas.append(gamma)
        iterations = k + 1
        if _relative_change(eta, current) <= config.tol:
            break

    policy, est, _, div = evaluate(eta, config.max_iters)
    worst_div = max(worst_div, div)
    residual = optimality_residual(eta, eta_prior, blr.chain_rule_grads(est, policy.mean))
    floored = floor_covariance(policy, config.cov_floor)
    if floored is not policy:
        policy, eta = floored, to_natural(floored)

    n_ctrl = n_control
    knots_mean = policy.mean.reshape(-1, n_ctrl)
    if lower is not None or upper is not None:
        knots_mean = np.clip(knots_mean, -np.inf if lower is None else lower, np.inf if upper is None else upper)
    warn = worst_div > 0.5
    if warn:
        log.warning("round %d: %.0f%% of rollouts diverged", round_index, 100 * worst_div)
    return RoundResult(
        posterior=eta,
        policy=policy,
        t0=t0,
        planned=knots_mean,
        executed=knots_mean[: config.shift].copy(),
        iterations=iterations,
        residual=residual,
        noise_floor=est.noise_floor,
        objective_trace=trace,
        gamma_trace=gammas,
        divergence_fraction=worst_div,
        quality_warning=warn,
        wall_time=time.perf_counter() - started,
    )


@dataclass
class ClosedLoopResult:
    rounds: list[RoundResult]
    times: NDArray  # (P,)
    states: NDArray  # (P, n)
    controls: NDArray  # (P-1, m) control applied on [times[i], times[i+1])
    aborted: bool = False


def run_closed_loop(
    config: MpcConfig,
    problem: Problem,
    plant: DynamicsModel,
    x0: ArrayLike,
    eta_init: NaturalParams,
    n_control: int = 1,
    lower: ArrayLike | None = None,
    upper: ArrayLike | None = None,
    gradient_fn: GradientFn | None = None,
    on_round: Callable[[int, RoundResult], None] | None = None,
) -> ClosedLoopResult:
    """Plan, execute the first ``shift`` knots of the mean on ``plant``, repeat."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    times, states, controls = [0.0], [x.copy()], []
    rounds: list[RoundResult] = []
    eta_prior = eta_init
    dt = config.replan_period
    exec_param_bounds = dict(
        lower=None if lower is None else tuple(np.broadcast_to(lower, (n_control,))),
        upper=None if upper is None else tuple(np.broadcast_to(upper, (n_control,))),
    )
    for j in range(config.rounds):
        t_j = j * dt
        result = plan_round(
            config, x, problem, eta_prior, t0=t_j, n_control=n_control, lower=lower, upper=upper,
            warm_start=j > 0, round_index=j, gradient_fn=gradient_fn,
        )
        rounds.append(result)
        if on_round is not None:
            on_round(j, result)
        exec_param = ControlParameterization(t_j, t_j + dt, config.shift, n_control, **exec_param_bounds)
        try:
            traj = integrate(plant, x, exec_param, result.executed.ravel(), config.exec_steps)
        except RolloutDivergence as exc:
            log.error("execution diverged in round %d at step %d", j, exc.step)
            return ClosedLoopResult(rounds, np.array(times), np.array(states), _stack(controls, n_control), True)
        times.extend(traj.times[1:].tolist())
        states.extend(traj.states[1:])
        controls.extend(traj.controls)
        x = traj.states[-1].copy()
        eta_prior = result.posterior
    return ClosedLoopResult(rounds, np.array(times), np.array(states), _stack(controls, n_control))


def _stack(rows: list, n_control: int) -> NDArray:
    return np.array(rows).reshape(-1, n_control)
