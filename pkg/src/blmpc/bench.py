"""Command implementations behind the CLI: plan, run and oracle.

Each command takes a resolved :class:`~blmpc.config.Setup` and an output
directory and writes plain files (see :mod:`blmpc.records`). Nothing here
prints; return values carry what the CLI reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from . import oracles
from .config import Setup
from .mpc import ClosedLoopResult, RoundResult, iteration_seed, plan_round, run_closed_loop
from .policy import GaussianPolicy
from .records import (
    RECORD_VERSION,
    policy_json,
    trajectory_header,
    trajectory_rows,
    versions,
    write_csv,
    write_json,
    write_jsonl,
)
from .rollout import ControlParameterization, integrate

PARTICLES = 100_000
BOOTSTRAP = 200


@dataclass
class CommandResult:
    files: list[str]
    summary: dict[str, Any]
    failed: bool = False


def _round_summary(j: int, r: RoundResult, seed: int, max_iters: int) -> dict[str, Any]:
    keys = [iteration_seed(seed, j, k) for k in range(r.iterations)] + [iteration_seed(seed, j, max_iters)]
    return {
        "round": j,
        "t0": r.t0,
        "iterations": r.iterations,
        "residual": r.residual,
        "noise_floor": r.noise_floor,
        "divergence_fraction": r.divergence_fraction,
        "quality_warning": r.quality_warning,
        "planned": r.planned,
        "executed": r.executed,
        "posterior": policy_json(r.policy),
        "objective_trace": r.objective_trace,
        "gamma_trace": r.gamma_trace,
        "sample_keys": keys,
        "wall_time": r.wall_time,
    }


def _diagnostics(j: int, r: RoundResult) -> list[dict[str, Any]]:
    rows = [
        {"round": j, "k": k, "objective": obj, "gamma": g}
        for k, (obj, g) in enumerate(zip(r.objective_trace, r.gamma_trace))
    ]
    rows.append({
        "round": j,
        "event": "round_end",
        "iterations": r.iterations,
        "residual": r.residual,
        "noise_floor": r.noise_floor,
        "divergence_fraction": r.divergence_fraction,
        "quality_warning": r.quality_warning,
    })
    return rows


def _knot_times(setup: Setup, t0: float = 0.0) -> NDArray:
    return t0 + setup.mpc.horizon / setup.mpc.knots * np.arange(setup.mpc.knots)


def _write_posterior(path: Path, setup: Setup, r: RoundResult) -> None:
    write_json(path, {
        "task": setup.task.id,
        **policy_json(r.policy, r.posterior),
        "iterations": r.iterations,
        "residual": r.residual,
        "noise_floor": r.noise_floor,
    })


def cmd_plan(setup: Setup, out: Path) -> CommandResult:
    """One planning round from the initial state; writes the posterior and planned controls."""
    out.mkdir(parents=True, exist_ok=True)
    lower, upper = setup.bounds
    r = plan_round(
        setup.mpc, np.asarray(setup.task.x0), setup.problem, setup.eta_prior,
        n_control=setup.n_control, lower=lower, upper=upper, warm_start=False,
    )
    _write_posterior(out / "posterior.json", setup, r)
    header = ["knot", "time"] + [f"u{i}" for i in range(setup.n_control)]
    times = _knot_times(setup)
    write_csv(out / "plan.csv", header, ([i, float(times[i]), *r.planned[i].tolist()] for i in range(setup.mpc.knots)))
    write_jsonl(out / "diagnostics.jsonl", _diagnostics(0, r))
    return CommandResult(
        ["posterior.json", "plan.csv", "diagnostics.jsonl"],
        {"iterations": r.iterations, "residual": r.residual, "noise_floor": r.noise_floor},
    )


def _executed_costs(setup: Setup, loop: ClosedLoopResult, row_round: list[int]) -> NDArray:
    """Cumulative executed cost per CSV row.

    Rollout tasks integrate the running cost along the executed trajectory
    (trapezoid rule, no terminal term). Knot-vector-only tasks add the cost of
    each round's executed mean when that round's segment ends.
    """
    n = loop.times.size
    out = np.zeros(n)
    if setup.cost is not None:
        total = 0.0
        for i in range(n - 1):
            u = loop.controls[i][None]
            left = setup.cost.running(loop.times[i], loop.states[i][None], u)[0]
            right = setup.cost.running(loop.times[i + 1], loop.states[i + 1][None], u)[0]
            total += 0.5 * (loop.times[i + 1] - loop.times[i]) * (left + right)
            out[i + 1] = total
        return out
    fn = setup.problem.fn
    total = 0.0
    for i in range(1, n):
        j = row_round[i]
        if i == n - 1 or row_round[i + 1] != j:
            total += float(fn(loop.rounds[j].policy.mean[None])[0])
        out[i] = total
    return out


def _row_rounds(loop: ClosedLoopResult, exec_steps: int) -> list[int]:
    return [0] + [(i - 1) // exec_steps for i in range(1, loop.times.size)]


def cmd_run(setup: Setup, out: Path) -> CommandResult:
    """Closed loop; writes the run record, trajectory, diagnostics and final posterior."""
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    lower, upper = setup.bounds
    diagnostics: list[dict[str, Any]] = []
    loop = run_closed_loop(
        setup.mpc, setup.problem, setup.plant, np.asarray(setup.task.x0), setup.eta_prior,
        n_control=setup.n_control, lower=lower, upper=upper,
        on_round=lambda j, r: diagnostics.extend(_diagnostics(j, r)),
    )
    total = time.perf_counter() - started
    row_round = _row_rounds(loop, setup.mpc.exec_steps)
    costs = _executed_costs(setup, loop, row_round)
    write_csv(
        out / "trajectory.csv",
        trajectory_header(setup.model.n_state, setup.n_control),
        trajectory_rows(row_round, loop.times, loop.states, loop.controls, costs),
    )
    write_jsonl(out / "diagnostics.jsonl", diagnostics)
    last = loop.rounds[-1]
    _write_posterior(out / "posterior.json", setup, last)
    final = loop.states[-1]
    record = {
        "record_version": RECORD_VERSION,
        "config": setup.resolved,
        "seeds": {"base": setup.mpc.seed, "derivation": "SeedSequence([seed, round, iteration])"},
        "versions": versions(),
        "aborted": loop.aborted,
        "final_state": final,
        "final_state_norm": float(np.linalg.norm(final)),
        "rounds": [_round_summary(j, r, setup.mpc.seed, setup.mpc.max_iters) for j, r in enumerate(loop.rounds)],
        "trajectory": {
            "times": loop.times,
            "states": loop.states,
            "controls": loop.controls,
            "cost": costs,
        },
        "timing": {"total": total, "rounds": [r.wall_time for r in loop.rounds]},
    }
    write_json(out / "run_record.json", record)
    return CommandResult(
        ["run_record.json", "trajectory.csv", "diagnostics.jsonl", "posterior.json"],
        {"rounds": len(loop.rounds), "final_state_norm": float(np.linalg.norm(final)), "aborted": loop.aborted},
        failed=loop.aborted,
    )


def _prior_regulariser(prior: GaussianPolicy):
    chol_inv = np.linalg.inv(prior.chol)
    const = 0.5 * prior.dim * np.log(2.0 * np.pi) + 0.5 * prior.logdet_cov()

    def reg(thetas: NDArray) -> NDArray:
        z = (thetas - prior.mean) @ chol_inv.T
        return 0.5 * np.sum(z * z, axis=1) + const

    return reg


def quadratic_oracles(setup: Setup, rounds: int, particles: int = PARTICLES, n_boot: int = BOOTSTRAP) -> dict[str, Any]:
    """Analytic, quadrature (d <= 2) and particle posteriors after ``rounds`` identical conditionings."""
    Q, b = setup.theta_cost
    prior = setup.prior
    fn = setup.problem.fn
    analytic = oracles.analytic_quadratic_posterior(prior, rounds * Q, rounds * b)
    out: dict[str, Any] = {"task": setup.task.id, "rounds": rounds, "analytic": policy_json(analytic)}

    def repeated(th: NDArray) -> NDArray:
        return rounds * fn(th)

    if prior.dim <= 2:
        sd = np.sqrt(np.diag(analytic.cov))
        bounds = tuple((float(m - 14 * s), float(m + 14 * s)) for m, s in zip(analytic.mean, sd))
        counts = (4001,) if prior.dim == 1 else (801, 801)
        q = oracles.quadrature_posterior(repeated, _prior_regulariser(prior), oracles.QuadratureGrid(bounds, counts))
        out["quadrature"] = {"Z": q.Z, "log_Z": q.log_Z, "J_B_star": q.J_B_star, "mean": q.mean, "cov": q.cov}
    else:
        out["quadrature"] = None

    ens = oracles.ParticleEnsemble.from_policy(prior, particles, setup.mpc.seed)
    neg_log_z = 0.0
    for _ in range(rounds):
        ens, step = oracles.particle_sequential_update(ens, fn)
        neg_log_z += step
    base = oracles.ParticleEnsemble.from_policy(prior, particles, setup.mpc.seed)
    d = prior.dim

    def stat(e: oracles.ParticleEnsemble, nlz: float) -> NDArray:
        return np.concatenate([e.mean, e.cov.ravel(), [nlz]])

    se = oracles.bootstrap_se(base, repeated, stat, n_boot=n_boot, seed=setup.mpc.seed)
    out["particle"] = {
        "M": particles,
        "mean": ens.mean,
        "cov": ens.cov,
        "neg_log_Z": neg_log_z,
        "ess": ens.ess,
        "se_mean": se[:d],
        "se_cov": se[d:d + d * d].reshape(d, d),
        "se_neg_log_Z": float(se[-1]),
    }
    return out


def reference_loop(setup: Setup, **search) -> oracles.ReferenceLoop:
    """Brute-force receding-horizon reference over the same knot space and schedule."""
    cfg = setup.mpc
    lower, upper = setup.bounds
    m = setup.n_control
    dt = cfg.replan_period
    if "radius" not in search:
        search["radius"] = 2.0 if lower is None or upper is None else 0.25 * float(np.max(np.subtract(upper, lower)))
    search.setdefault("sweeps", 8)
    search.setdefault("points", 17)
    search.setdefault("refinements", 4)
    search.setdefault("tol", 1e-9)
    if lower is not None:
        search.setdefault("lower", np.tile(lower, cfg.knots))
    if upper is not None:
        search.setdefault("upper", np.tile(upper, cfg.knots))

    def plan_cost(th, x, t0):
        return setup.problem.probe_costs(th, x, t0)

    def execute(theta, x, t0):
        param = ControlParameterization(t0, t0 + dt, cfg.shift, m, lower, upper)
        traj = integrate(setup.plant, x, param, theta[: cfg.shift * m], cfg.exec_steps)
        return traj.times, traj.states, traj.controls

    return oracles.receding_horizon_reference(
        plan_cost, execute, setup.task.x0, setup.prior.dim, cfg.rounds, cfg.shift, m, dt, **search,
    )


def cmd_oracle(setup: Setup, out: Path) -> CommandResult:
    """Reference solutions for the configured cost."""
    out.mkdir(parents=True, exist_ok=True)
    if setup.theta_cost is not None:
        data = quadratic_oracles(setup, setup.mpc.rounds)
        write_json(out / "oracle.json", data)
        return CommandResult(["oracle.json"], {"analytic_mean": data["analytic"]["mean"].tolist()})
    ref = reference_loop(setup)
    final = ref.states[-1]
    write_json(out / "oracle.json", {
        "task": setup.task.id,
        "kind": "coordinate_descent_receding_horizon",
        "rounds": setup.mpc.rounds,
        "final_state": final,
        "final_state_norm": float(np.linalg.norm(final)),
        "plan_costs": ref.costs,
        "plans": ref.plans,
    })
    loop = ClosedLoopResult([], ref.times, ref.states, ref.controls)
    rows = trajectory_rows(
        _row_rounds(loop, setup.mpc.exec_steps), ref.times, ref.states, ref.controls,
        _executed_costs(setup, loop, []),
    )
    write_csv(out / "reference_trajectory.csv", trajectory_header(setup.model.n_state, setup.n_control), rows)
    return CommandResult(["oracle.json", "reference_trajectory.csv"], {"final_state_norm": float(np.linalg.norm(final))})
