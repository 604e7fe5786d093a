"""Self-checks run by ``blmpc validate``.

Each suite returns a list of :class:`Check`; the CLI exits nonzero if any
check fails. Suites look up library functions through their modules at call
time so a patched function is what gets tested.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from . import blr, cost, oracles, policy, rollout


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}.{self.name}: {self.value:.3g} (limit {self.limit:.3g}) {self.detail}".rstrip()


def _check(suite: str, name: str, value: float, limit: float, detail: str = "") -> Check:
    return Check(suite, name, bool(np.isfinite(value) and value <= limit), float(value), float(limit), detail)


def random_gaussian(gen: np.random.Generator, d: int, log_eig: tuple[float, float] = (-2.0, 1.0)) -> policy.GaussianPolicy:
    """Mean ~ N(0, I); covariance with log10-uniform eigenvalues in a random basis."""
    basis, _ = np.linalg.qr(gen.standard_normal((d, d)))
    eig = 10.0 ** gen.uniform(*log_eig, size=d)
    return policy.GaussianPolicy.from_cov(gen.standard_normal(d), (basis * eig) @ basis.T)


def _sym_unit(d: int, i: int, j: int) -> NDArray:
    e = np.zeros((d, d))
    e[i, j] += 0.5
    e[j, i] += 0.5
    return e


def fd_log_partition_gradient(eta: policy.NaturalParams, rel_step: float = 1e-5) -> tuple[NDArray, NDArray]:
    """Central differences of ``A`` in ``eta1`` and in symmetric directions of ``eta2``."""
    d = eta.dim
    A = policy.log_partition
    g1 = np.empty(d)
    for i in range(d):
        h = rel_step * max(1.0, abs(eta.eta1[i]))
        e = np.zeros(d)
        e[i] = h
        g1[i] = (A(policy.NaturalParams(eta.eta1 + e, eta.eta2)) - A(policy.NaturalParams(eta.eta1 - e, eta.eta2))) / (2 * h)
    g2 = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            h = rel_step * max(1.0, abs(eta.eta2[i, j]))
            e = h * _sym_unit(d, i, j)
            g2[i, j] = g2[j, i] = (
                A(policy.NaturalParams(eta.eta1, eta.eta2 + e)) - A(policy.NaturalParams(eta.eta1, eta.eta2 - e))
            ) / (2 * h)
    return g1, g2


def suite_duality(seed: int = 0) -> list[Check]:
    gen = np.random.default_rng([seed, 1])
    worst_rt, worst_fd = 0.0, 0.0
    for n in range(100):
        d = (1, 2, 4, 8)[n % 4]
        q = random_gaussian(gen, d)
        eta = policy.to_natural(q)
        back = policy.from_natural(eta)
        mu = policy.to_expectation(q)
        back_mu = policy.from_expectation(mu)
        for other in (back, back_mu):
            worst_rt = max(
                worst_rt,
                float(np.max(np.abs(other.mean - q.mean)) / max(1.0, np.max(np.abs(q.mean)))),
                float(np.max(np.abs(other.cov - q.cov)) / max(1.0, np.max(np.abs(q.cov)))),
            )
        mu_back = policy.to_expectation(policy.from_natural(policy.to_natural(policy.from_expectation(mu))))
        worst_rt = max(worst_rt, float(np.max(np.abs(mu_back.flat() - mu.flat())) / max(1.0, np.max(np.abs(mu.flat())))))
        g1, g2 = fd_log_partition_gradient(eta)
        scale = max(1.0, float(np.max(np.abs(mu.flat()))))
        worst_fd = max(worst_fd, float(max(np.max(np.abs(g1 - mu.mu1)), np.max(np.abs(g2 - mu.mu2)))) / scale)
    return [
        _check("duality", "round_trip", worst_rt, 1e-10, "natural/expectation/moment maps, 100 Gaussians"),
        _check("duality", "grad_log_partition", worst_fd, 1e-5, "central differences of A vs mu"),
    ]


def suite_bregman(seed: int = 0) -> list[Check]:
    gen = np.random.default_rng([seed, 2])
    worst = 0.0
    for n in range(100):
        d = (1, 2, 4, 8)[n % 4]
        q1, q2 = random_gaussian(gen, d), random_gaussian(gen, d)
        kl = policy.kl_divergence(q1, q2)
        br = policy.bregman_a_star(policy.to_expectation(q1), policy.to_expectation(q2))
        worst = max(worst, abs(kl - br))
    return [_check("bregman", "kl_equals_bregman", worst, 1e-8, "100 random pairs")]


def _one_step(prior: policy.GaussianPolicy, Q: NDArray, b: NDArray) -> policy.GaussianPolicy:
    est = oracles.quadratic_gradients(prior, Q, b)
    eta_prior = policy.to_natural(prior)
    eta = blr.natural_blr_step(eta_prior, eta_prior, blr.chain_rule_grads(est, prior.mean), 1.0)
    return policy.from_natural(eta)


def _policy_error(a: policy.GaussianPolicy, b: policy.GaussianPolicy) -> float:
    return float(max(np.max(np.abs(a.mean - b.mean)), np.max(np.abs(a.cov - b.cov))))


def suite_fixed_point(seed: int = 0) -> list[Check]:
    prior = policy.GaussianPolicy.from_cov([1.0], [[1.0]])
    Q, b = np.array([[1.0]]), np.array([0.0])
    target = policy.GaussianPolicy.from_cov([0.5], [[0.5]])
    err_1d = _policy_error(_one_step(prior, Q, b), target)

    gen = np.random.default_rng([seed, 3])
    err_8d = 0.0
    for _ in range(5):
        p = random_gaussian(gen, 8, (-1.0, 0.5))
        a = gen.standard_normal((8, 8))
        Q8 = a @ a.T / 8 + 0.1 * np.eye(8)
        b8 = gen.standard_normal(8)
        err_8d = max(err_8d, _policy_error(_one_step(p, Q8, b8), oracles.analytic_quadratic_posterior(p, Q8, b8)))

    # zero gradients at gamma = 1 must return the prior
    p = random_gaussian(gen, 4)
    eta_p = policy.to_natural(p)
    zero = blr.GradientEstimate.exact(np.zeros(4), np.zeros((4, 4)))
    eta = blr.natural_blr_step(eta_p, eta_p, blr.chain_rule_grads(zero, p.mean), 1.0)
    err_zero = float(np.max(np.abs(eta.flat() - eta_p.flat())))

    # the (m, S) form and the natural form agree
    p2 = random_gaussian(gen, 3)
    cur = random_gaussian(gen, 3)
    a = gen.standard_normal((3, 3))
    est = oracles.quadratic_gradients(cur, a @ a.T, gen.standard_normal(3))
    nat = policy.from_natural(
        blr.natural_blr_step(policy.to_natural(cur), policy.to_natural(p2), blr.chain_rule_grads(est, cur.mean), 0.3)
    )
    err_forms = _policy_error(nat, blr.gaussian_blr_step(cur, p2, est, 0.3))
    return [
        _check("fixed_point", "one_step_1d", err_1d, 1e-10, "prior N(1,1), Q=1 -> N(0.5,0.5)"),
        _check("fixed_point", "one_step_8d", err_8d, 1e-8, "random SPD Q vs conjugate posterior"),
        _check("fixed_point", "zero_gradient", err_zero, 0.0, "gamma=1 returns the prior"),
        _check("fixed_point", "gaussian_form", err_forms, 1e-10, "(m, S) update equals natural update"),
    ]


def _z_scores(est: blr.GradientEstimate, grad_m: NDArray, grad_s: NDArray) -> float:
    zm = np.abs(est.grad_m - grad_m) / est.se_m
    zs = np.abs(est.grad_sigma - grad_s) / est.se_sigma
    return float(max(np.max(zm), np.max(zs)))


def suite_estimators(seed: int = 0, n: int = 10_000) -> list[Check]:
    d = 2
    Q = np.eye(d)
    q = policy.GaussianPolicy.from_cov(np.zeros(d), np.eye(d))
    quad = lambda th: 0.5 * np.sum(np.atleast_2d(th) ** 2, axis=1)  # noqa: E731
    thetas = policy.sample(q, n, seed)
    samples = blr.Samples(thetas, quad(thetas), np.zeros(n, dtype=bool))
    checks = []
    for kind in (blr.EstimatorKind.BONNET_PRICE_FD, blr.EstimatorKind.SCORE_FUNCTION):
        est = blr.estimate_gradients(samples, q, kind, cost_eval=quad)
        checks.append(_check("estimators", f"{kind.value}_quadratic", _z_scores(est, np.zeros(d), 0.5 * Q), 3.0,
                             "max |estimate - exact| / SE"))

    # mean-parameter gradients of E = tr(Q mu2)/2 + b^T mu1 are (b, Q/2) at any point
    gen = np.random.default_rng([seed, 4])
    cur = random_gaussian(gen, 3)
    a = gen.standard_normal((3, 3))
    Q3, b3 = a @ a.T, gen.standard_normal(3)
    g1, g2 = blr.chain_rule_grads(oracles.quadratic_gradients(cur, Q3, b3), cur.mean)
    err = float(max(np.max(np.abs(g1 - b3)), np.max(np.abs(g2 - 0.5 * Q3))))
    checks.append(_check("estimators", "chain_rule", err, 1e-10, "grad_mu of a quadratic expectation"))

    # Gauss-Newton replaces the Hessian by g g^T: on a linear cost it reports a^T a / 2 instead of 0
    lin_a = np.array([1.0, -2.0])
    lin = lambda th: np.atleast_2d(th) @ lin_a  # noqa: E731
    est = blr.estimate_gradients(blr.Samples(thetas, lin(thetas), samples.diverged), q, "gauss_newton", cost_eval=lin)
    bias = 0.5 * np.outer(lin_a, lin_a)
    checks.append(_check("estimators", "gauss_newton_bias", float(np.max(np.abs(est.grad_sigma - bias))), 1e-6,
                         "GN grad_S equals a a^T / 2 on a linear cost (true value 0)"))
    est = blr.estimate_gradients(blr.Samples(thetas, lin(thetas), samples.diverged), q, "bonnet_price_fd", cost_eval=lin)
    checks.append(_check("estimators", "bonnet_price_linear", float(np.max(np.abs(est.grad_sigma))), 1e-6,
                         "Stein Hessian vanishes on a linear cost"))
    return checks


def suite_oracles(seed: int = 0, particles: int = 100_000) -> list[Check]:
    half_sq = lambda th: 0.5 * np.sum(np.atleast_2d(th) ** 2, axis=1)  # noqa: E731
    grid = oracles.QuadratureGrid(((-10.0, 10.0),), (4001,))
    quad = oracles.quadrature_posterior(half_sq, half_sq, grid)
    prior = policy.GaussianPolicy.from_cov([0.0], [[1.0]])
    analytic = oracles.analytic_quadratic_posterior(prior, [[1.0]], [0.0])

    ens = oracles.ParticleEnsemble.from_policy(prior, particles, seed)
    updated, neg_log_z = oracles.particle_sequential_update(ens, half_sq)
    stat = lambda e, nlz: np.array([e.mean[0], e.cov[0, 0], nlz])  # noqa: E731
    se = oracles.bootstrap_se(ens, half_sq, stat, seed=seed)
    seq_j = 0.5 * math.log(2.0)  # -log E_{N(0,1)}[exp(-theta^2/2)]
    return [
        _check("oracles", "quadrature_Z", abs(quad.Z - math.sqrt(math.pi)), 1e-6, "C = R = theta^2/2"),
        _check("oracles", "quadrature_J", abs(quad.J_B_star + 0.5 * math.log(math.pi)), 1e-6),
        _check("oracles", "quadrature_vs_analytic",
               float(max(abs(quad.mean[0] - analytic.mean[0]), abs(quad.cov[0, 0] - analytic.cov[0, 0]))), 1e-6),
        _check("oracles", "analytic", _policy_error(analytic, policy.GaussianPolicy.from_cov([0.0], [[0.5]])), 1e-12),
        _check("oracles", "particle_mean", abs(updated.mean[0] - analytic.mean[0]) / se[0], 3.0, "in bootstrap SEs"),
        _check("oracles", "particle_var", abs(updated.cov[0, 0] - analytic.cov[0, 0]) / se[1], 3.0, "in bootstrap SEs"),
        _check("oracles", "particle_neg_log_Z", abs(neg_log_z - seq_j) / se[2], 3.0, "in bootstrap SEs"),
        _check("oracles", "particle_normalised", abs(updated.weights.sum() - 1.0), 1e-12),
    ]


def rk4_error_ratio(steps: int = 20) -> float:
    model = rollout.FunctionModel(lambda t, x, u: x, 1, 1)
    errors = []
    for s in (steps, 2 * steps):
        param = rollout.ControlParameterization(0.0, 1.0, 1, 1)
        traj = rollout.integrate(model, [1.0], param, [0.0], s)
        errors.append(abs(traj.states[-1, 0] - math.e))
    return errors[0] / errors[1]


def trapezoid_error_ratio(steps: int = 20) -> float:
    # running cost exp(t) over [0, 1] on a static model: integral e - 1
    spec = cost.CostSpec(cost.zero_terminal, lambda t, x, u: np.full(x.shape[0], math.exp(t)))
    model = rollout.FunctionModel(lambda t, x, u: np.zeros_like(x), 1, 1)
    errors = []
    for s in (steps, 2 * steps):
        param = rollout.ControlParameterization(0.0, 1.0, 1, 1)
        traj = rollout.integrate(model, [0.0], param, [0.0], s)
        errors.append(abs(cost.trajectory_cost(traj, spec) - (math.e - 1.0)))
    return errors[0] / errors[1]


def suite_integrator(seed: int = 0) -> list[Check]:
    rk4, trap = rk4_error_ratio(), trapezoid_error_ratio()
    return [
        Check("integrator", "rk4_order", 12.0 <= rk4 <= 20.0, rk4, 20.0, "error ratio under step halving, want [12, 20]"),
        Check("integrator", "trapezoid_order", 3.0 <= trap <= 5.0, trap, 5.0, "error ratio under step halving, want [3, 5]"),
    ]


SUITES: dict[str, Callable[..., list[Check]]] = {
    "duality": suite_duality,
    "bregman": suite_bregman,
    "fixed_point": suite_fixed_point,
    "estimators": suite_estimators,
    "oracles": suite_oracles,
    "integrator": suite_integrator,
}


def run_suites(names: list[str] | None = None, seed: int = 0) -> tuple[list[Check], dict[str, float]]:
    """Run the named suites (all by default); returns checks and per-suite seconds."""
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; choose from {', '.join(SUITES)}")
    checks, timing = [], {}
    for name in names:
        started = time.perf_counter()
        try:
            checks.extend(SUITES[name](seed))
        except Exception as exc:  # a crashing suite is a failed suite
            checks.append(Check(name, "error", False, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"))
        timing[name] = time.perf_counter() - started
    return checks, timing
