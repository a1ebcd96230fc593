"""Quadratic tracking cost on performance variables and inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..dynamics import ConfigurationError, Trajectory


def _quad(W: np.ndarray, d: np.ndarray) -> np.ndarray:
    # fixed summation order so the value does not depend on batch layout
    total = None
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            if W[i, j] == 0.0:
                continue
            term = W[i, j] * d[..., i] * d[..., j]
            total = term if total is None else total + term
    if total is None:
        return np.zeros(d.shape[:-1])
    return total


@dataclass(frozen=True)
class CostSpec:
    """``sum_t |p(x_t) - z_ref|_Q^2 + |u_t - u_ref|_R^2`` over ``t < T``."""

    Q: np.ndarray
    R: np.ndarray
    z_ref: np.ndarray
    u_ref: np.ndarray
    performance: Callable[[np.ndarray], np.ndarray]
    horizon: int

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if Q.shape[0] != Q.shape[1] or R.shape[0] != R.shape[1]:
            raise ConfigurationError("cost weights must be square")
        if not np.allclose(Q, Q.T) or not np.allclose(R, R.T):
            raise ConfigurationError("cost weights must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ConfigurationError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ConfigurationError("R must be positive definite")
        z_ref = np.atleast_1d(np.asarray(self.z_ref, dtype=float))
        u_ref = np.atleast_1d(np.asarray(self.u_ref, dtype=float))
        if z_ref.size != Q.shape[0] or u_ref.size != R.shape[0]:
            raise ConfigurationError("reference sizes do not match the weights")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        for name, val in (("Q", Q), ("R", R), ("z_ref", z_ref), ("u_ref", u_ref)):
            object.__setattr__(self, name, val)

    def stage(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        dz = self.performance(x) - self.z_ref
        du = u - self.u_ref
        return _quad(self.Q, dz) + _quad(self.R, du)

    def per_step(self, trajectory: Trajectory) -> np.ndarray:
        T = trajectory.horizon
        return self.stage(trajectory.states[..., :T, :], trajectory.inputs)

    def total(self, trajectory: Trajectory, *, check_horizon: bool = True) -> np.ndarray:
        if check_horizon and trajectory.horizon != self.horizon:
            raise ConfigurationError(
                f"trajectory horizon {trajectory.horizon} != cost horizon {self.horizon}")
        return self.per_step(trajectory).sum(axis=-1)


def quadratic_cost(Q, R, z_ref, u_ref, horizon: int,
                   performance: Optional[Callable] = None) -> CostSpec:
    return CostSpec(Q, R, z_ref, u_ref, performance or (lambda x: x), horizon)
