"""Decoding knot vectors into controls and simulating the prediction model.

Controls are zero-order-hold knots: the flattened vector ``theta`` holds
``knots`` blocks of ``n_control`` values, block ``j`` active on
``[t0 + j*T/K, t0 + (j+1)*T/K)``. Integration is classical fixed-step RK4
with the control frozen at its step-start value for all four stages.

Simulation is vectorised over a leading batch axis; models receive
``x`` of shape ``(B, n)`` and ``u`` of shape ``(B, m)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import RolloutDivergence

if TYPE_CHECKING:
    from .cost import CostSpec


class DynamicsModel:
    """Deterministic vector field ``xdot = f(t, x, u)``.

    Subclasses implement :meth:`f`; it must be pure and accept a leading
    batch axis. Instances are shared between threads.
    """

    n_state: int
    n_control: int

    def f(self, t: float, x: NDArray, u: NDArray) -> NDArray:
        raise NotImplementedError

    def __call__(self, t: float, x: NDArray, u: NDArray) -> NDArray:
        return self.f(t, x, u)


class FunctionModel(DynamicsModel):
    """Wrap a plain callable ``f(t, x, u)`` as a :class:`DynamicsModel`."""

    def __init__(self, f: Callable[[float, NDArray, NDArray], NDArray], n_state: int, n_control: int):
        self._f = f
        self.n_state = n_state
        self.n_control = n_control

    def f(self, t, x, u):
        return self._f(t, x, u)


@dataclass(frozen=True)
class ControlParameterization:
    t0: float
    tf: float
    knots: int
    n_control: int
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.tf > self.t0:
            raise ValueError(f"horizon end {self.tf} must exceed start {self.t0}")
        if self.knots < 1 or self.n_control < 1:
            raise ValueError("knots and n_control must be >= 1")
        for name in ("lower", "upper"):
            bound = getattr(self, name)
            if bound is not None:
                bound = tuple(float(b) for b in np.broadcast_to(bound, (self.n_control,)))
                object.__setattr__(self, name, bound)
        if self.lower is not None and self.upper is not None:
            if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("control bounds must satisfy lower <= upper")

    @property
    def horizon(self) -> float:
        return self.tf - self.t0

    @property
    def knot_duration(self) -> float:
        return self.horizon / self.knots

    @property
    def dim(self) -> int:
        return self.knots * self.n_control

    def shifted(self, t0: float) -> ControlParameterization:
        return ControlParameterization(t0, t0 + self.horizon, self.knots, self.n_control, self.lower, self.upper)

    def clamp(self, u: NDArray) -> NDArray:
        if self.lower is None and self.upper is None:
            return u
        lo = -np.inf if self.lower is None else np.asarray(self.lower)
        hi = np.inf if self.upper is None else np.asarray(self.upper)
        return np.clip(u, lo, hi)


class Trajectory(NamedTuple):
    times: NDArray  # (S+1,)
    states: NDArray  # (S+1, n)
    controls: NDArray  # (S, m)


class RolloutRecord(NamedTuple):
    theta: NDArray
    trajectory: Trajectory
    cost: float
    diverged: bool


@dataclass(frozen=True)
class RolloutBatch:
    """Simulated dataset for ``N`` parameter draws, stored column-wise."""

    thetas: NDArray  # (N, d)
    times: NDArray  # (S+1,)
    states: NDArray  # (N, S+1, n)
    controls: NDArray  # (N, S, m)
    costs: NDArray  # (N,)
    diverged: NDArray  # (N,) bool

    def __len__(self) -> int:
        return self.costs.shape[0]

    def __getitem__(self, i: int) -> RolloutRecord:
        traj = Trajectory(self.times, self.states[i], self.controls[i])
        return RolloutRecord(self.thetas[i], traj, float(self.costs[i]), bool(self.diverged[i]))

    @property
    def records(self) -> list[RolloutRecord]:
        return [self[i] for i in range(len(self))]


def _check_theta(theta: NDArray, param: ControlParameterization) -> NDArray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != param.dim:
        raise ValueError(f"theta has {theta.shape[-1]} entries, expected knots*n_control = {param.dim}")
    return theta


def decode_control(theta: ArrayLike, param: ControlParameterization, tau: float) -> NDArray:
    theta = _check_theta(np.atleast_1d(theta), param)
    # 1e-12 relative slack absorbs rounding of tau = t0 + s*h at the ends
    slack = 1e-12 * max(1.0, abs(param.t0), abs(param.tf))
    if not (param.t0 - slack <= tau <= param.tf + slack):
        raise ValueError(f"tau={tau} outside horizon [{param.t0}, {param.tf}]")
    j = int(np.floor((tau - param.t0) / param.knot_duration))
    j = min(max(j, 0), param.knots - 1)
    return param.clamp(theta[j * param.n_control : (j + 1) * param.n_control])


def _knot_controls(thetas: NDArray, param: ControlParameterization) -> NDArray:
    # (B, K, m) clamped knot values
    return param.clamp(thetas.reshape(thetas.shape[0], param.knots, param.n_control))


def _check_steps(steps: int, param: ControlParameterization) -> int:
    if steps < 1 or steps % param.knots:
        raise ValueError(f"steps={steps} must be a positive multiple of knots={param.knots}")
    return steps


def simulate(
    model: DynamicsModel,
    x0: ArrayLike,
    param: ControlParameterization,
    thetas: ArrayLike,
    steps: int,
) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Integrate a batch of knot vectors from a common initial state.

    Returns ``(times, states, controls, first_bad_step)`` where
    ``first_bad_step[b]`` is -1 for trajectories that stayed finite.
    """
    steps = _check_steps(steps, param)
    thetas = _check_theta(np.atleast_2d(thetas), param)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != model.n_state:
        raise ValueError(f"initial state has {x0.size} entries, model expects {model.n_state}")
    batch = thetas.shape[0]
    h = param.horizon / steps
    per_knot = steps // param.knots
    times = param.t0 + h * np.arange(steps + 1)
    knots = _knot_controls(thetas, param)

    states = np.empty((batch, steps + 1, model.n_state))
    controls = np.empty((batch, steps, param.n_control))
    first_bad = np.full(batch, -1, dtype=np.int64)
    x = np.broadcast_to(x0, (batch, model.n_state)).copy()
    states[:, 0] = x
    with np.errstate(all="ignore"):
        for s in range(steps):
            u = knots[:, s // per_knot]
            t = times[s]
            k1 = model(t, x, u)
            k2 = model(t + 0.5 * h, x + 0.5 * h * k1, u)
            k3 = model(t + 0.5 * h, x + 0.5 * h * k2, u)
            k4 = model(t + h, x + h * k3, u)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            controls[:, s] = u
            states[:, s + 1] = x
            bad = (first_bad < 0) & ~np.all(np.isfinite(x), axis=1)
            first_bad[bad] = s + 1
    return times, states, controls, first_bad


def integrate(
    model: DynamicsModel,
    x_t: ArrayLike,
    param: ControlParameterization,
    theta: ArrayLike,
    steps: int,
) -> Trajectory:
    """Simulate one knot vector; raises :class:`RolloutDivergence` on blow-up."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    times, states, controls, first_bad = simulate(model, x_t, param, theta[None, :], steps)
    if first_bad[0] >= 0:
        raise RolloutDivergence(int(first_bad[0]))
    return Trajectory(times, states[0], controls[0])


def _chunks(n: int, parts: int) -> list[slice]:
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def rollout_batch(
    model: DynamicsModel,
    x_t: ArrayLike,
    param: ControlParameterization,
    thetas: ArrayLike,
    cost: CostSpec,
    steps: int,
    threads: int = 1,
) -> RolloutBatch:
    """Simulate and score every draw; diverged draws get the penalty cost and a flag."""
    from .cost import batch_costs

    thetas = _check_theta(np.atleast_2d(np.asarray(thetas, dtype=float)), param)
    n = thetas.shape[0]
    steps = _check_steps(steps, param)
    n_state = model.n_state
    states = np.empty((n, steps + 1, n_state))
    controls = np.empty((n, steps, param.n_control))
    costs = np.empty(n)
    diverged = np.empty(n, dtype=bool)
    times_holder: list[NDArray] = []

    def work(sl: slice) -> None:
        times, st, ct, first_bad = simulate(model, x_t, param, thetas[sl], steps)
        c, flag = batch_costs(times, st, ct, cost)
        states[sl], controls[sl] = st, ct
        costs[sl] = c
        diverged[sl] = flag | (first_bad >= 0)
        if sl.start == 0:
            times_holder.append(times)

    slices = _chunks(n, threads)
    if len(slices) == 1:
        work(slices[0])
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            list(pool.map(work, slices))
    costs[diverged] = cost.divergence_penalty
    return RolloutBatch(thetas, times_holder[0], states, controls, costs, diverged)


def rollout_costs(
    model: DynamicsModel,
    x_t: ArrayLike,
    param: ControlParameterization,
    thetas: ArrayLike,
    cost: CostSpec,
    steps: int,
    threads: int = 1,
    chunk: int = 8192,
) -> tuple[NDArray, NDArray]:
    """Costs and divergence flags only; trajectories are dropped chunk by chunk."""
    from .cost import batch_costs

    thetas = _check_theta(np.atleast_2d(np.asarray(thetas, dtype=float)), param)
    n = thetas.shape[0]
    costs = np.empty(n)
    diverged = np.empty(n, dtype=bool)

    def work(sl: slice) -> None:
        for start in range(sl.start, sl.stop, chunk):
            sub = slice(start, min(start + chunk, sl.stop))
            times, st, ct, first_bad = simulate(model, x_t, param, thetas[sub], steps)
            c, flag = batch_costs(times, st, ct, cost)
            costs[sub] = c
            diverged[sub] = flag | (first_bad >= 0)

    slices = _chunks(n, threads)
    if len(slices) == 1:
        work(slices[0])
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            list(pool.map(work, slices))
    costs[diverged] = cost.divergence_penalty
    return costs, diverged
