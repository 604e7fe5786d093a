"""Bolza trajectory cost passed through a utility transform."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .rollout import RolloutBatch, Trajectory

log = logging.getLogger(__name__)

TerminalCost = Callable[[NDArray], NDArray]
RunningCost = Callable[[float, NDArray, NDArray], NDArray]


class Utility(str, enum.Enum):
    NEGATED = "negated"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class CostSpec:
    """Terminal cost ``phi(x)``, running cost ``L(t, x, u)`` and utility.

    Both callables take a leading batch axis: ``phi`` maps ``(B, n)`` to
    ``(B,)`` and ``L`` maps ``(t, (B, n), (B, m))`` to ``(B,)``.
    """

    terminal: TerminalCost
    running: RunningCost
    utility: Utility = Utility.NEGATED
    temperature: float = 1.0
    divergence_penalty: float = 1e6

    def __post_init__(self) -> None:
        object.__setattr__(self, "utility", Utility(self.utility))
        if not self.temperature > 0.0:
            raise ValueError("utility temperature must be positive")


def zero_terminal(x: NDArray) -> NDArray:
    return np.zeros(x.shape[0])


def zero_running(t: float, x: NDArray, u: NDArray) -> NDArray:
    return np.zeros(x.shape[0])


def bolza(times: NDArray, states: NDArray, controls: NDArray, spec: CostSpec) -> NDArray:
    """``phi(x(tf)) + int L dt`` for a batch, trapezoid rule on the rollout grid.

    Step ``s`` contributes ``h/2 * (L(t_s, x_s, u_s) + L(t_{s+1}, x_{s+1}, u_s))``.
    Accumulation runs over steps in order so results do not depend on batch size.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if states.ndim == 2:
        return bolza(times, states[None], controls[None], spec)
    batch, n_steps = controls.shape[0], controls.shape[1]
    total = np.zeros(batch)
    with np.errstate(all="ignore"):
        left = spec.running(times[0], states[:, 0], controls[:, 0])
        for s in range(n_steps):
            h = times[s + 1] - times[s]
            u = controls[:, s]
            right = spec.running(times[s + 1], states[:, s + 1], u)
            total = total + 0.5 * h * (left + right)
            if s + 1 < n_steps:
                left = spec.running(times[s + 1], states[:, s + 1], controls[:, s + 1])
        total = total + spec.terminal(states[:, -1])
    return total


def apply_utility(b: NDArray, spec: CostSpec) -> NDArray:
    """Trajectory cost ``C = -U(B)``."""
    b = np.asarray(b, dtype=float)
    if spec.utility is Utility.NEGATED:
        return b.copy()
    if np.any(b < 0.0):
        log.warning("negative Bolza value under exponential utility; cost falls below -1")
    with np.errstate(under="ignore"):
        return -np.exp(-b / spec.temperature)


def batch_costs(times: NDArray, states: NDArray, controls: NDArray, spec: CostSpec) -> tuple[NDArray, NDArray]:
    """Per-trajectory cost and a flag marking non-finite Bolza values (set to the penalty)."""
    b = bolza(times, states, controls, spec)
    bad = ~np.isfinite(b)
    c = apply_utility(np.where(bad, 0.0, b), spec)
    c[bad] = spec.divergence_penalty
    return c, bad


def trajectory_cost(traj: Trajectory, spec: CostSpec) -> float:
    c, _ = batch_costs(traj.times, traj.states[None], traj.controls[None], spec)
    return float(c[0])


def expected_cost(batch: RolloutBatch | NDArray) -> float:
    """Monte-Carlo mean of per-sample costs, summed in index order."""
    costs = batch.costs if isinstance(batch, RolloutBatch) else np.asarray(batch, dtype=float)
    if costs.size == 0:
        raise ValueError("cannot average an empty batch")
    total = 0.0
    for c in costs.tolist():
        total += c
    return total / costs.size
