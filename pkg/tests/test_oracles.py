import math

import numpy as np
import pytest

from blmpc.oracles import (
    BoundaryMassError,
    ParticleEnsemble,
    QuadratureGrid,
    analytic_quadratic_posterior,
    bootstrap_se,
    coordinate_descent,
    particle_sequential_update,
    quadrature_posterior,
)
from blmpc.policy import GaussianPolicy


def half_sq(th):
    th = np.atleast_2d(th)
    return 0.5 * np.sum(th * th, axis=1)


def zero(th):
    return np.zeros(np.atleast_2d(th).shape[0])


LINE = QuadratureGrid(((-10.0, 10.0),), (4001,))


def test_quadrature_gaussian_integral():
    q = quadrature_posterior(half_sq, half_sq, LINE)
    assert abs(q.Z - 1.7724538509055159) <= 1e-6  # sqrt(pi)
    assert abs(q.J_B_star - (-0.5723649429247001)) <= 1e-6  # -log(pi)/2
    assert q.mean[0] == pytest.approx(0.0, abs=1e-12)
    assert q.cov[0, 0] == pytest.approx(0.5, abs=1e-10)


def test_quadrature_zero_cost():
    q = quadrature_posterior(zero, half_sq, QuadratureGrid(((-12.0, 12.0),), (4001,)))
    assert q.Z == pytest.approx(math.sqrt(2 * math.pi), abs=1e-8)
    assert q.cov[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_quadrature_linear_tilt():
    q = quadrature_posterior(lambda th: 0.7 * np.atleast_2d(th)[:, 0], half_sq, QuadratureGrid(((-12.0, 12.0),), (4001,)))
    assert q.mean[0] == pytest.approx(-0.7, abs=1e-8)


def test_quadrature_two_dimensional():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    grid = QuadratureGrid(((-8.0, 8.0), (-8.0, 8.0)), (401, 401))
    q = quadrature_posterior(lambda th: 0.5 * np.einsum("ni,ij,nj->n", th, Q, th), half_sq, grid)
    cov = np.linalg.inv(np.eye(2) + Q)
    np.testing.assert_allclose(q.cov, cov, atol=1e-8)
    assert q.Z == pytest.approx(2 * math.pi * math.sqrt(np.linalg.det(cov)), rel=1e-8)


def test_quadrature_boundary_mass_rejected():
    with pytest.raises(BoundaryMassError):
        quadrature_posterior(zero, half_sq, QuadratureGrid(((-2.0, 2.0),), (101,)))


@pytest.mark.parametrize(
    "bounds,counts",
    [(((-1.0, 1.0),), (8,)), (((1.0, -1.0),), (32,)), (((-1.0, 1.0),) * 3, (16,) * 3), (((-1.0, 1.0),) * 2, (2000, 2000))],
)
def test_grid_invariants(bounds, counts):
    with pytest.raises(ValueError):
        QuadratureGrid(bounds, counts)


def test_ensemble_invariants():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((3, 1)), np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((2, 1)), np.array([1.5, -0.5]))


PRIOR = GaussianPolicy.from_cov([0.0], [[1.0]])


def test_particle_zero_and_constant_cost():
    ens = ParticleEnsemble.from_policy(PRIOR, 1000, 0)
    same, nlz = particle_sequential_update(ens, zero)
    np.testing.assert_array_equal(same.weights, ens.weights)
    assert nlz == pytest.approx(0.0, abs=1e-12)
    shifted, nlz = particle_sequential_update(ens, lambda th: np.full(np.atleast_2d(th).shape[0], 2.5))
    np.testing.assert_allclose(shifted.weights, ens.weights, rtol=1e-12)
    assert nlz == pytest.approx(2.5, abs=1e-12)


def test_particle_posterior_variance():
    ens = ParticleEnsemble.from_policy(PRIOR, 100_000, 1)
    post, nlz = particle_sequential_update(ens, half_sq)
    se = bootstrap_se(ens, half_sq, lambda e, n: np.array([e.cov[0, 0], n]), seed=1)
    assert abs(post.cov[0, 0] - 0.5) <= 3 * se[0]
    assert abs(nlz - 0.5 * math.log(2.0)) <= 3 * se[1]
    assert abs(post.weights.sum() - 1.0) <= 1e-12
    assert 0 < post.ess < 100_000


def test_particle_underflow():
    ens = ParticleEnsemble.from_policy(PRIOR, 10, 0)
    with pytest.raises(FloatingPointError):
        particle_sequential_update(ens, lambda th: np.full(np.atleast_2d(th).shape[0], np.inf))


@pytest.mark.parametrize(
    "prior,Q,b,mean,var",
    [
        (([1.0], [[1.0]]), [[1.0]], [0.0], 0.5, 0.5),
        (([0.7], [[2.0]]), [[0.0]], [0.0], 0.7, 2.0),
        (([0.0], [[1.0]]), [[0.0]], [1.0], -1.0, 1.0),
    ],
)
def test_analytic_posterior(prior, Q, b, mean, var):
    post = analytic_quadratic_posterior(GaussianPolicy.from_cov(*prior), Q, b)
    assert post.mean[0] == pytest.approx(mean, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(var, abs=1e-15)


def test_oracle_triangle_two_dimensional():
    Q, b = np.array([[1.5, 0.3], [0.3, 0.8]]), np.array([0.2, -0.5])
    prior = GaussianPolicy.from_cov([0.5, -0.2], [[1.0, 0.2], [0.2, 0.6]])
    cost = lambda th: 0.5 * np.einsum("ni,ij,nj->n", th, Q, th) + th @ b  # noqa: E731
    prec = prior.precision

    def reg(th):
        d = th - prior.mean
        return 0.5 * np.einsum("ni,ij,nj->n", d, prec, d)

    analytic = analytic_quadratic_posterior(prior, Q, b)
    q = quadrature_posterior(cost, reg, QuadratureGrid(((-7.0, 7.0), (-7.0, 7.0)), (601, 601)))
    np.testing.assert_allclose(q.mean, analytic.mean, atol=1e-6)
    np.testing.assert_allclose(q.cov, analytic.cov, atol=1e-6)
    ens = ParticleEnsemble.from_policy(prior, 100_000, 2)
    post, _ = particle_sequential_update(ens, cost)
    se = bootstrap_se(ens, cost, lambda e, n: np.concatenate([e.mean, e.cov.ravel()]), seed=2)
    assert np.all(np.abs(post.mean - analytic.mean) <= 3 * se[:2])
    assert np.all(np.abs(post.cov.ravel() - analytic.cov.ravel()) <= 3 * se[2:])


def test_coordinate_descent_quadratic():
    target = np.array([0.3, -1.2, 2.0])
    theta, best = coordinate_descent(lambda th: np.sum((np.atleast_2d(th) - target) ** 2, axis=1), np.zeros(3), radius=3.0)
    np.testing.assert_allclose(theta, target, atol=1e-4)
    assert best <= 1e-8


def test_coordinate_descent_respects_bounds():
    theta, _ = coordinate_descent(lambda th: np.sum((np.atleast_2d(th) - 5.0) ** 2, axis=1), np.zeros(2), lower=-1.0, upper=1.0)
    np.testing.assert_array_equal(theta, [1.0, 1.0])
