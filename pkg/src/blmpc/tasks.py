"""Benchmark tasks: dynamics, cost construction and per-task defaults."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.typing import NDArray

from .cost import CostSpec, Utility
from .rollout import DynamicsModel

TASK_IDS = ("double_integrator", "pendulum", "cartpole", "quadratic_synthetic")


class DoubleIntegrator(DynamicsModel):
    n_state, n_control = 2, 1

    def f(self, t, x, u):
        out = np.empty_like(x)
        out[:, 0] = x[:, 1]
        out[:, 1] = u[:, 0]
        return out


class Pendulum(DynamicsModel):
    """Damped pendulum; angle 0 hangs down, pi is upright."""

    n_state, n_control = 2, 1

    def __init__(self, mass: float = 1.0, length: float = 1.0, gravity: float = 9.81, damping: float = 0.1):
        self.mass, self.length, self.gravity, self.damping = mass, length, gravity, damping

    def f(self, t, x, u):
        angle, rate = x[:, 0], x[:, 1]
        accel = (
            -self.gravity / self.length * np.sin(angle)
            - self.damping * rate
            + u[:, 0] / (self.mass * self.length**2)
        )
        return np.stack([rate, accel], axis=1)


class CartPole(DynamicsModel):
    """Cart-pole with state (position, pole angle, velocity, angular rate); angle 0 is upright.

    ``pole_length`` is the half-length of the pole.
    """

    n_state, n_control = 4, 1

    def __init__(self, cart_mass: float = 1.0, pole_mass: float = 0.1, pole_length: float = 0.5, gravity: float = 9.81):
        self.cart_mass, self.pole_mass = cart_mass, pole_mass
        self.pole_length, self.gravity = pole_length, gravity

    def f(self, t, x, u):
        _, phi, v, omega = x.T
        total = self.cart_mass + self.pole_mass
        sin, cos = np.sin(phi), np.cos(phi)
        temp = (u[:, 0] + self.pole_mass * self.pole_length * omega**2 * sin) / total
        alpha = (self.gravity * sin - cos * temp) / (
            self.pole_length * (4.0 / 3.0 - self.pole_mass * cos**2 / total)
        )
        accel = temp - self.pole_mass * self.pole_length * alpha * cos / total
        return np.stack([v, omega, accel, alpha], axis=1)


class Static(DynamicsModel):
    """``xdot = 0``; used where the cost depends on the knot vector only."""

    def __init__(self, n_state: int = 1, n_control: int = 1):
        self.n_state, self.n_control = n_state, n_control

    def f(self, t, x, u):
        return np.zeros_like(x)


def _double_integrator_features(x: NDArray) -> NDArray:
    return x


def _pendulum_features(x: NDArray) -> NDArray:
    # zero at the upright equilibrium
    return np.stack([1.0 + np.cos(x[:, 0]), x[:, 1]], axis=1)


def _cartpole_features(x: NDArray) -> NDArray:
    p, phi, v, omega = x.T
    return np.stack([p, np.sin(phi), 1.0 - np.cos(phi), v, omega], axis=1)


FEATURES: dict[str, Callable[[NDArray], NDArray]] = {
    "double_integrator": _double_integrator_features,
    "pendulum": _pendulum_features,
    "cartpole": _cartpole_features,
}

PHYSICAL_DEFAULTS: dict[str, dict[str, float]] = {
    "double_integrator": {},
    "pendulum": {"mass": 1.0, "length": 1.0, "gravity": 9.81, "damping": 0.1},
    "cartpole": {"cart_mass": 1.0, "pole_mass": 0.1, "pole_length": 0.5, "gravity": 9.81},
    "quadratic_synthetic": {},
}

# Documented defaults per task; every key here can be overridden in the config file.
TASK_DEFAULTS: dict[str, dict[str, Any]] = {
    "double_integrator": {
        "task": {"x0": [1.0, 0.0], "u_lower": None, "u_upper": None},
        "cost": {"q": [100.0, 10.0], "r": [1.0], "qf": [100.0, 10.0], "target": [0.0, 0.0]},
        "policy": {"mean": 0.0, "var": 1.0},
        "mpc": {"horizon": 2.0, "knots": 10, "steps": 50, "samples": 128, "max_iters": 20,
                "cov_floor": 1e-2, "injected_var": 1.0, "rounds": 20},
    },
    "pendulum": {
        "task": {"x0": [0.0, 0.0], "u_lower": [-5.0], "u_upper": [5.0]},
        "cost": {"q": [20.0, 0.5], "r": [0.05], "qf": [50.0, 1.0], "target": [0.0, 0.0]},
        "policy": {"mean": 0.0, "var": 4.0},
        "mpc": {"horizon": 2.0, "knots": 10, "steps": 50, "samples": 128, "max_iters": 20,
                "cov_floor": 1e-2, "injected_var": 4.0, "rounds": 30},
    },
    "cartpole": {
        "task": {"x0": [0.0, 0.2, 0.0, 0.0], "u_lower": [-20.0], "u_upper": [20.0]},
        "cost": {"q": [10.0, 50.0, 50.0, 1.0, 1.0], "r": [0.01], "qf": [10.0, 50.0, 50.0, 1.0, 1.0],
                 "target": [0.0, 0.0, 0.0, 0.0, 0.0]},
        "policy": {"mean": 0.0, "var": 4.0},
        "mpc": {"horizon": 1.5, "knots": 10, "steps": 50, "samples": 128, "max_iters": 20,
                "cov_floor": 1e-2, "injected_var": 4.0, "rounds": 20},
    },
    "quadratic_synthetic": {
        "task": {"x0": [0.0], "u_lower": None, "u_upper": None},
        "cost": {"Q": [[1.0]], "b": [0.0]},
        "policy": {"mean": 0.0, "var": 1.0},
        "mpc": {"horizon": 1.0, "knots": 1, "steps": 1, "samples": 4096, "max_iters": 50,
                "cov_floor": 1e-6, "injected_var": 1.0, "rounds": 1, "warm_start": "identity"},
    },
}


@dataclass(frozen=True)
class TaskSpec:
    id: str
    params: dict[str, float] = field(default_factory=dict)
    x0: tuple[float, ...] = (0.0,)
    u_lower: tuple[float, ...] | None = None
    u_upper: tuple[float, ...] | None = None
    state_lower: tuple[float, ...] | None = None
    state_upper: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.id not in TASK_IDS:
            raise ValueError(f"unknown task {self.id!r}; choose from {', '.join(TASK_IDS)}")
        if any(not v > 0.0 for v in self.params.values()):
            raise ValueError("physical parameters must be positive")
        x0 = np.asarray(self.x0)
        if self.state_lower is not None and np.any(x0 < np.asarray(self.state_lower)):
            raise ValueError("initial state lies below the state box")
        if self.state_upper is not None and np.any(x0 > np.asarray(self.state_upper)):
            raise ValueError("initial state lies above the state box")


def build_model(spec: TaskSpec, scale: float = 1.0) -> DynamicsModel:
    """Dynamics for ``spec``; ``scale`` multiplies every physical parameter (plant mismatch)."""
    params = {k: v * scale for k, v in spec.params.items()}
    if spec.id == "double_integrator":
        return DoubleIntegrator()
    if spec.id == "pendulum":
        return Pendulum(**params)
    if spec.id == "cartpole":
        return CartPole(**params)
    return Static(n_state=len(spec.x0))


def _weighted_squares(e: NDArray, w: NDArray) -> NDArray:
    # column by column so each row's sum is independent of the batch it sits in
    sq = w * e * e
    total = sq[:, 0].copy()
    for i in range(1, sq.shape[1]):
        total += sq[:, i]
    return total


def quadratic_state_cost(
    features: Callable[[NDArray], NDArray],
    q: NDArray,
    r: NDArray,
    qf: NDArray,
    target: NDArray,
    utility: Utility | str = Utility.NEGATED,
    temperature: float = 1.0,
    divergence_penalty: float = 1e6,
) -> CostSpec:
    """``L = e^T diag(q) e + u^T diag(r) u``, ``phi = e^T diag(qf) e`` with ``e = features(x) - target``."""
    q, r, qf, target = (np.asarray(a, dtype=float) for a in (q, r, qf, target))

    def running(t, x, u):
        e = features(x) - target
        return _weighted_squares(e, q) + _weighted_squares(u, r)

    def terminal(x):
        return _weighted_squares(features(x) - target, qf)

    return CostSpec(terminal, running, Utility(utility), temperature, divergence_penalty)


def quadratic_theta_cost(Q: NDArray, b: NDArray) -> Callable[[NDArray], NDArray]:
    """Batch cost ``theta^T Q theta / 2 + b^T theta``."""
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)

    def cost(thetas: NDArray) -> NDArray:
        thetas = np.atleast_2d(thetas)
        return 0.5 * np.einsum("ni,ij,nj->n", thetas, Q, thetas) + thetas @ b

    return cost
