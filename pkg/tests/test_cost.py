import math

import numpy as np
import pytest

from blmpc.cost import CostSpec, Utility, apply_utility, batch_costs, expected_cost, trajectory_cost, zero_running, zero_terminal
from blmpc.rollout import ControlParameterization, FunctionModel, integrate, rollout_batch
from blmpc.validation import trapezoid_error_ratio

still = FunctionModel(lambda t, x, u: np.zeros_like(x), 1, 1)
unit = ControlParameterization(0.0, 1.0, 1, 1)


def control_energy(utility=Utility.NEGATED, temperature=1.0):
    return CostSpec(zero_terminal, lambda t, x, u: u[:, 0] ** 2, utility, temperature)


def test_constant_integrand():
    traj = integrate(still, [0.0], unit, [1.0], 10)
    assert trajectory_cost(traj, control_energy()) == pytest.approx(1.0, abs=1e-15)


def test_exponential_utility():
    traj = integrate(still, [0.0], unit, [1.0], 10)
    assert trajectory_cost(traj, control_energy(Utility.EXPONENTIAL)) == pytest.approx(-math.exp(-1.0), abs=1e-15)


def test_terminal_only_at_origin():
    spec = CostSpec(lambda x: np.sum(x * x, axis=1), zero_running)
    traj = integrate(still, [0.0], unit, [0.0], 4)
    assert trajectory_cost(traj, spec) == 0.0
    assert trajectory_cost(traj, CostSpec(spec.terminal, zero_running, "exponential")) == -1.0


def test_trapezoid_order():
    assert 3.0 <= trapezoid_error_ratio() <= 5.0


def test_non_finite_cost_gets_penalty():
    spec = CostSpec(lambda x: np.full(x.shape[0], np.inf), zero_running, divergence_penalty=77.0)
    c, bad = batch_costs(np.array([0.0, 1.0]), np.zeros((2, 2, 1)), np.zeros((2, 1, 1)), spec)
    np.testing.assert_array_equal(c, [77.0, 77.0])
    assert bad.all()


def test_exponential_range_and_limit():
    spec = control_energy(Utility.EXPONENTIAL, temperature=2.0)
    b = np.array([0.0, 0.1, 5.0, 1e3 * 2.0])
    c = apply_utility(b, spec)
    assert np.all((c >= -1.0) & (c < 0.0) | (c == 0.0))
    assert c[0] == -1.0
    assert abs(c[-1]) <= 1e-300


def test_utilities_preserve_order():
    b = np.sort(np.random.default_rng(0).uniform(0, 10, 50))
    for spec in (control_energy(), control_energy(Utility.EXPONENTIAL, 3.0)):
        assert np.all(np.diff(apply_utility(b, spec)) >= 0.0)


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        control_energy(Utility.EXPONENTIAL, 0.0)


def test_expected_cost_examples():
    assert expected_cost(np.full(9, 2.5)) == 2.5
    assert expected_cost(np.array([0.0, 1.0])) == 0.5
    with pytest.raises(ValueError):
        expected_cost(np.array([]))


def test_expected_cost_clt():
    n = 100_000
    costs = np.random.default_rng(5).exponential(2.0, n)  # mean 2, sd 2
    assert abs(expected_cost(costs) - 2.0) <= 4 * 2.0 / math.sqrt(n)


def test_expected_cost_of_batch():
    batch = rollout_batch(still, [0.0], unit, np.array([[1.0], [2.0]]), control_energy(), 4)
    assert expected_cost(batch) == pytest.approx(2.5, abs=1e-14)
