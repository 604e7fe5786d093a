"""Exception types raised across the package."""

from __future__ import annotations

import numpy as np


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A matrix that must be SPD could not be Cholesky-factorised."""


class StepRejected(NotPositiveDefinite):
    """A learning-rule step left the valid natural-parameter set."""


class RolloutDivergence(RuntimeError):
    """Forward simulation produced a non-finite state."""

    def __init__(self, step: int, message: str | None = None) -> None:
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""
