import json

import numpy as np
import pytest
import yaml

from blmpc.config import config_from_dict, load_config, resolve, parse_config
from blmpc.errors import ConfigError
from blmpc.mpc import RolloutProblem, ThetaCostProblem
from blmpc.tasks import TASK_DEFAULTS, TASK_IDS, TaskSpec


def write(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


@pytest.mark.parametrize("task", TASK_IDS)
def test_minimal_config_gets_defaults(tmp_path, task):
    setup = load_config(write(tmp_path, {"task": {"id": task}}), env=False)
    defaults = TASK_DEFAULTS[task]
    for key, value in defaults["mpc"].items():
        assert getattr(setup.mpc, key) == value
    assert list(setup.task.x0) == defaults["task"]["x0"]
    assert setup.mpc.schedule.gamma0 == 1.0 and setup.mpc.schedule.decay == "harmonic"
    assert setup.mpc.anchor == "shifted"
    kind = ThetaCostProblem if task == "quadratic_synthetic" else RolloutProblem
    assert isinstance(setup.problem, kind)
    assert setup.prior.dim == setup.mpc.knots * setup.n_control


def test_steps_not_multiple_of_knots_names_both_keys(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, {"task": {"id": "double_integrator"}, "mpc": {"steps": 55, "knots": 10}}))
    assert "steps" in str(info.value) and "knots" in str(info.value)


def test_gamma_out_of_range(tmp_path):
    with pytest.raises(ConfigError, match="mpc.gamma0"):
        load_config(write(tmp_path, {"task": {"id": "double_integrator"}, "mpc": {"gamma0": 1.5}}))


@pytest.mark.parametrize(
    "data,path",
    [
        ({"task": {"id": "double_integrator"}, "mpc": {"sample": 10}}, "mpc.sample"),
        ({"task": {"id": "double_integrator", "colour": 1}}, "task.colour"),
        ({"task": {"id": "double_integrator"}, "extra": {}}, "extra"),
        ({"task": {"id": "pendulum", "params": {"mas": 1.0}}}, "task.params"),
        ({"task": {"id": "rocket"}}, "task.id"),
        ({"mpc": {}}, "task"),
    ],
)
def test_schema_errors_carry_key_path(tmp_path, data, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        load_config(write(tmp_path, data))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("task: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(path)


def test_invariant_violations():
    with pytest.raises(ConfigError, match="physical parameters"):
        config_from_dict({"task": {"id": "pendulum", "params": {"mass": -1.0}}})
    with pytest.raises(ConfigError, match="initial state"):
        config_from_dict({"task": {"id": "double_integrator", "x0": [5.0, 0.0], "state_upper": [1.0, 1.0]}})
    with pytest.raises(ConfigError, match="task.x0"):
        config_from_dict({"task": {"id": "double_integrator", "x0": [1.0]}})
    with pytest.raises(ConfigError, match="cost.q"):
        config_from_dict({"task": {"id": "double_integrator"}, "cost": {"q": [1.0, 2.0, 3.0]}})
    with pytest.raises(ConfigError, match="positive semidefinite"):
        config_from_dict({"task": {"id": "quadratic_synthetic"}, "cost": {"Q": [[-1.0]], "b": [0.0]}})
    with pytest.raises(ConfigError, match="quadratic_synthetic only"):
        config_from_dict({"task": {"id": "pendulum"}, "cost": {"Q": [[1.0]]}})


def test_policy_variance_forms():
    base = {"task": {"id": "quadratic_synthetic"}, "mpc": {"knots": 2, "steps": 2}, "cost": {"Q": np.eye(2).tolist(), "b": [0.0, 0.0]}}
    s = config_from_dict({**base, "policy": {"mean": [1.0, 2.0], "var": [0.5, 2.0]}})
    np.testing.assert_allclose(s.prior.cov, np.diag([0.5, 2.0]))
    s = config_from_dict({**base, "policy": {"var": [[1.0, 0.2], [0.2, 1.0]]}})
    np.testing.assert_allclose(s.prior.cov, [[1.0, 0.2], [0.2, 1.0]])
    with pytest.raises(ConfigError, match="policy.var"):
        config_from_dict({**base, "policy": {"var": [[1.0, 2.0], [2.0, 1.0]]}})


def test_env_overrides(monkeypatch):
    monkeypatch.setenv("BLMPC_SEED", "42")
    monkeypatch.setenv("BLMPC_THREADS", "4")
    resolved = resolve(parse_config({"task": {"id": "double_integrator"}, "mpc": {"seed": 3}}))
    assert resolved["mpc"]["seed"] == 42 and resolved["mpc"]["threads"] == 4
    assert resolve(parse_config({"task": {"id": "double_integrator"}}), env=False)["mpc"]["seed"] == 0
    monkeypatch.setenv("BLMPC_SEED", "many")
    with pytest.raises(ConfigError, match="BLMPC_SEED"):
        resolve(parse_config({"task": {"id": "double_integrator"}}))


def test_run_record_is_accepted(tmp_path):
    resolved = resolve(parse_config({"task": {"id": "pendulum"}, "mpc": {"rounds": 2}}), env=False)
    path = tmp_path / "run_record.json"
    path.write_text(json.dumps({"record_version": 1, "config": resolved}), encoding="utf-8")
    setup = load_config(path, env=False)
    assert setup.resolved == resolved
    assert resolve(parse_config({"record_version": 1, "config": resolved}), env=False) == resolved


def test_plant_scale_perturbs_plant_only():
    s = config_from_dict({"task": {"id": "pendulum", "plant_scale": 1.2}})
    assert s.plant.mass == pytest.approx(1.2 * s.model.mass)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("rocket")
    with pytest.raises(ValueError):
        TaskSpec("cartpole", {"pole_mass": 0.0})
