"""Configuration files: schema, default resolution and assembly of run objects.

A config is a single YAML document with sections ``task``, ``cost``,
``policy`` and ``mpc``. Only ``task.id`` is required; everything else falls
back to the per-task defaults in :data:`blmpc.tasks.TASK_DEFAULTS` and then to
the :class:`~blmpc.mpc.MpcConfig` field defaults. Unknown keys are errors.

A ``run_record.json`` written by ``blmpc run`` is also accepted: its
``config`` block is the fully resolved config of that run.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .blr import EstimatorKind, LearningRateSchedule
from .cost import CostSpec, Utility
from .errors import ConfigError
from .mpc import MpcConfig, Problem, RolloutProblem, ThetaCostProblem
from .policy import GaussianPolicy, NaturalParams, to_natural
from .rollout import ControlParameterization, DynamicsModel
from .tasks import (
    FEATURES,
    PHYSICAL_DEFAULTS,
    TASK_DEFAULTS,
    TaskSpec,
    build_model,
    quadratic_state_cost,
    quadratic_theta_cost,
)

SEED_ENV = "BLMPC_SEED"
THREADS_ENV = "BLMPC_THREADS"

Vector = list[float]
ScalarOrVector = Union[float, list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskSection(_Strict):
    id: Literal["double_integrator", "pendulum", "cartpole", "quadratic_synthetic"]
    params: dict[str, float] = Field(default_factory=dict)
    x0: Optional[Vector] = None
    u_lower: Optional[ScalarOrVector] = None
    u_upper: Optional[ScalarOrVector] = None
    state_lower: Optional[Vector] = None
    state_upper: Optional[Vector] = None
    plant_scale: float = Field(1.0, gt=0.0)


class CostSection(_Strict):
    q: Optional[Vector] = None
    r: Optional[Vector] = None
    qf: Optional[Vector] = None
    target: Optional[Vector] = None
    Q: Optional[list[Vector]] = None
    b: Optional[Vector] = None
    utility: Literal["negated", "exponential"] = "negated"
    temperature: float = Field(1.0, gt=0.0)
    divergence_penalty: float = 1e6


class PolicySection(_Strict):
    mean: ScalarOrVector = 0.0
    var: Union[float, list[float], list[list[float]]] = 1.0


class MpcSection(_Strict):
    horizon: Optional[float] = Field(None, gt=0.0)
    knots: Optional[int] = Field(None, ge=1)
    steps: Optional[int] = Field(None, ge=1)
    samples: Optional[int] = Field(None, ge=2)
    max_iters: Optional[int] = Field(None, ge=1)
    tol: Optional[float] = Field(None, ge=0.0)
    gamma0: Optional[float] = Field(None, gt=0.0, le=1.0)
    decay: Optional[Literal["constant", "harmonic"]] = None
    shift: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = Field(None, ge=0)
    cov_floor: Optional[float] = Field(None, gt=0.0)
    injected_var: Optional[float] = Field(None, gt=0.0)
    rounds: Optional[int] = Field(None, ge=1)
    estimator: Optional[Literal["bonnet_price_fd", "score_function", "gauss_newton"]] = None
    fd_step: Optional[float] = Field(None, gt=0.0)
    step_rule: Optional[Literal["natural", "log_objective"]] = None
    warm_start: Optional[Literal["shift", "identity"]] = None
    anchor: Optional[Literal["previous", "shifted"]] = None
    max_halvings: Optional[int] = Field(None, ge=0)
    threads: Optional[int] = Field(None, ge=1)


class ConfigFile(_Strict):
    task: TaskSection
    cost: CostSection = Field(default_factory=CostSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    mpc: MpcSection = Field(default_factory=MpcSection)


@dataclass
class Setup:
    """Everything a command needs, built from one resolved config."""

    mpc: MpcConfig
    task: TaskSpec
    cost: CostSpec | None
    model: DynamicsModel
    plant: DynamicsModel
    problem: Problem
    prior: GaussianPolicy
    n_control: int
    resolved: dict[str, Any]
    theta_cost: Any = None

    @property
    def eta_prior(self) -> NaturalParams:
        return to_natural(self.prior)

    @property
    def bounds(self) -> tuple[Any, Any]:
        return self.task.u_lower, self.task.u_upper


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(raw: Any) -> ConfigFile:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping with a 'task' section")
    if "record_version" in raw:
        raw = raw.get("config")
    try:
        return ConfigFile.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def read_config(path: str | os.PathLike) -> ConfigFile:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(raw)


def _pick(section: BaseModel, defaults: dict[str, Any]) -> dict[str, Any]:
    out = dict(defaults)
    for key, value in section.model_dump().items():
        if value is not None or key not in out:
            out[key] = value
    return out


def _env_int(name: str) -> int | None:
    value = os.environ.get(name)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {value!r}") from None


def resolve(cfg: ConfigFile, env: bool = True) -> dict[str, Any]:
    """Fully resolved plain-data config (the snapshot stored in run records)."""
    tid = cfg.task.id
    defaults = TASK_DEFAULTS[tid]
    task = _pick(cfg.task, defaults["task"])
    params = dict(PHYSICAL_DEFAULTS[tid])
    unknown = set(cfg.task.params) - set(params)
    if unknown:
        raise ConfigError(f"task.params: unknown key(s) {sorted(unknown)} for task {tid}")
    params.update(cfg.task.params)
    task["params"] = params
    cost = _pick(cfg.cost, defaults["cost"])
    policy = _pick(cfg.policy, defaults["policy"])
    mpc_defaults = {f.name: f.default for f in dataclasses.fields(MpcConfig) if f.name != "schedule"}
    mpc_defaults.update(gamma0=LearningRateSchedule().gamma0, decay=LearningRateSchedule().decay)
    mpc_defaults.update(defaults["mpc"])
    mpc = _pick(cfg.mpc, mpc_defaults)
    mpc["estimator"] = EstimatorKind(mpc["estimator"]).value
    if env:
        seed, threads = _env_int(SEED_ENV), _env_int(THREADS_ENV)
        if seed is not None:
            mpc["seed"] = seed
        if threads is not None:
            mpc["threads"] = threads
    return {"task": task, "cost": cost, "policy": policy, "mpc": mpc}


def _vector(value: Any, n: int, key: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"{key}: expected {n} entries, got {arr.size}")
    return arr


def _bounds(value: Any, n: int, key: str) -> tuple[float, ...] | None:
    if value is None:
        return None
    return tuple(_vector(value, n, key).tolist())


def build_setup(resolved: dict[str, Any]) -> Setup:
    t, c, p, m = resolved["task"], resolved["cost"], resolved["policy"], resolved["mpc"]
    mpc_kwargs = {k: v for k, v in m.items() if k not in ("gamma0", "decay")}
    try:
        mpc = MpcConfig(schedule=LearningRateSchedule(m["gamma0"], m["decay"]), **mpc_kwargs)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"mpc: {exc}") from None

    try:
        model_probe = build_model(TaskSpec(t["id"], t["params"], tuple(t["x0"])))
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None
    n_control = model_probe.n_control
    try:
        task = TaskSpec(
            id=t["id"],
            params=t["params"],
            x0=tuple(_vector(t["x0"], model_probe.n_state, "task.x0").tolist()),
            u_lower=_bounds(t["u_lower"], n_control, "task.u_lower"),
            u_upper=_bounds(t["u_upper"], n_control, "task.u_upper"),
            state_lower=None if t["state_lower"] is None else tuple(t["state_lower"]),
            state_upper=None if t["state_upper"] is None else tuple(t["state_upper"]),
        )
        param = ControlParameterization(0.0, mpc.horizon, mpc.knots, n_control, task.u_lower, task.u_upper)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None
    model = build_model(task)
    plant = build_model(task, scale=t["plant_scale"])
    d = param.dim

    cost_spec = None
    theta_cost = None
    if task.id == "quadratic_synthetic":
        if c["Q"] is None or c["b"] is None:
            raise ConfigError("cost: quadratic_synthetic needs both Q and b")
        Q = np.asarray(c["Q"], dtype=float)
        b = np.asarray(c["b"], dtype=float)
        if Q.shape != (d, d) or b.shape != (d,):
            raise ConfigError(f"cost: Q must be {d}x{d} and b length {d} (mpc.knots * n_control)")
        if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < 0.0:
            raise ConfigError("cost.Q must be symmetric positive semidefinite")
        theta_cost = (Q, b)
        problem: Problem = ThetaCostProblem(quadratic_theta_cost(Q, b), d, c["divergence_penalty"])
    else:
        if c["Q"] is not None or c["b"] is not None:
            raise ConfigError("cost.Q and cost.b apply to quadratic_synthetic only")
        nf = FEATURES[task.id](np.zeros((1, model.n_state))).shape[1]
        try:
            cost_spec = quadratic_state_cost(
                FEATURES[task.id],
                _vector(c["q"], nf, "cost.q"),
                _vector(c["r"], n_control, "cost.r"),
                _vector(c["qf"], nf, "cost.qf"),
                _vector(c["target"], nf, "cost.target"),
                c["utility"],
                c["temperature"],
                c["divergence_penalty"],
            )
        except ValueError as exc:
            raise ConfigError(f"cost: {exc}") from None
        problem = RolloutProblem(model, cost_spec, param, mpc.steps, mpc.threads)

    mean = _vector(p["mean"], d, "policy.mean")
    var = np.asarray(p["var"], dtype=float)
    if var.ndim == 0:
        cov = float(var) * np.eye(d)
    elif var.ndim == 1:
        cov = np.diag(_vector(var, d, "policy.var"))
    else:
        cov = var
    try:
        prior = GaussianPolicy.from_cov(mean, cov)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"policy.var: {exc}") from None
    return Setup(mpc, task, cost_spec, model, plant, problem, prior, n_control, resolved, theta_cost)


def load_config(path: str | os.PathLike, env: bool = True) -> Setup:
    """Read, validate and resolve a config file (or a run record)."""
    return build_setup(resolve(read_config(path), env=env))


def config_from_dict(raw: dict[str, Any], env: bool = False) -> Setup:
    return build_setup(resolve(parse_config(raw), env=env))
