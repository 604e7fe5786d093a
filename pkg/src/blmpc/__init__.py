"""Model predictive control with Gaussian policies updated by the Bayesian learning rule."""

from .blr import EstimatorKind, GradientEstimate, LearningRateSchedule, estimate_gradients, natural_blr_step
from .config import load_config
from .cost import CostSpec, Utility
from .mpc import MpcConfig, RoundResult, plan_round, run_closed_loop, warm_start_shift
from .policy import ExpectationParams, GaussianPolicy, NaturalParams, from_natural, to_expectation, to_natural
from .rollout import ControlParameterization, DynamicsModel, integrate, rollout_batch

__all__ = [
    "ControlParameterization",
    "CostSpec",
    "DynamicsModel",
    "EstimatorKind",
    "ExpectationParams",
    "GaussianPolicy",
    "GradientEstimate",
    "LearningRateSchedule",
    "MpcConfig",
    "NaturalParams",
    "RoundResult",
    "Utility",
    "estimate_gradients",
    "from_natural",
    "integrate",
    "load_config",
    "natural_blr_step",
    "plan_round",
    "rollout_batch",
    "run_closed_loop",
    "to_expectation",
    "to_natural",
    "warm_start_shift",
]
