"""Magnetic suspension of a steel ball below an electromagnet.

States: ball position x1 (m, measured downward from the magnet), velocity
x2 (m/s), coil current x3 (A).  Input: coil voltage.  Measured: x1, x3.

    x1' = x2
    x2' = g - (k/m) x2 - L0 a x3^2 / (2 m (a + x1)^2)
    x3' = (-R x3 + L0 a x2 x3 / (a + x1)^2 + u) / L(x1),  L(x1) = L1 + L0 a / (a + x1)
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..dynamics import NoiseSpec, Trajectory
from .base import Environment, _per_channel, read_env_config
from .cost import CostSpec


def maglev_rhs_factory(p: dict):
    m, k, g = p["mass"], p["friction"], p["gravity"]
    a, L0, L1, R = p["a"], p["L0"], p["L1"], p["resistance"]
    L0a = L0 * a

    def rhs(x, u):
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        v = u[..., 0]
        s = a + x1
        s2 = s * s
        dx1 = x2
        dx2 = g - (k / m) * x2 - L0a * x3 * x3 / (2.0 * m * s2)
        ind = L1 + L0a / s
        dx3 = (-R * x3 + L0a * x2 * x3 / s2 + v) / ind
        return np.stack([dx1, dx2, dx3], axis=-1)

    return rhs


def equilibrium_current(p: dict) -> float:
    s = p["a"] + p["target_position"]
    return float(np.sqrt(2.0 * p["mass"] * p["gravity"] * s * s / (p["L0"] * p["a"])))


def maglev_measure(x):
    return x[..., [0, 2]]


def make_maglev(config: Optional[dict] = None, overrides: Optional[dict] = None) -> Environment:
    cfg = config if config is not None else read_env_config("maglev", overrides)
    p = cfg["physical"]
    i_eq = equilibrium_current(p)
    x_eq = np.array([p["target_position"], 0.0, i_eq])
    u_eq = np.array([p["resistance"] * i_eq])

    ic = cfg["initial_conditions"]
    half = np.array([ic["position_halfwidth"], ic["velocity_halfwidth"],
                     ic["current_fraction"] * i_eq])

    def sample_initial(rng, count):
        return x_eq + rng.uniform(-1.0, 1.0, size=(count, 3)) * half

    noise = NoiseSpec(_per_channel(cfg["noise"]["process_std"], 3, "process_std"),
                      _per_channel(cfg["noise"]["measurement_std"], 2, "measurement_std"))
    cost = CostSpec(np.diag(cfg["cost"]["Q"]), np.diag(cfg["cost"]["R"]), x_eq, u_eq,
                    lambda x: x, cfg["horizon"])
    limits = None
    inp = cfg.get("input", {})
    if inp.get("clip", False):
        limits = (inp["low"], inp["high"])
    return Environment(
        name="maglev", rhs=maglev_rhs_factory(p), measure=maglev_measure,
        state_dim=3, input_dim=1, output_dim=2, dt=cfg["dt"], horizon=cfg["horizon"],
        noise=noise, cost=cost, equilibrium_state=x_eq, equilibrium_input=u_eq,
        nominal_estimate=x_eq.copy(), sample_initial=sample_initial,
        observer_chains=[[0, 1], [2]], config=cfg,
        reference_bound=cfg.get("reference", {}).get("bound", 1.0), input_limits=limits)


def maglev_cost(trajectory: Trajectory, env: Optional[Environment] = None) -> np.ndarray:
    """Tracking cost of a maglev trajectory (ball at 5 cm, equilibrium voltage)."""
    env = env or make_maglev()
    return env.cost.total(trajectory)


def mean_position_deviation(env: Environment, states: np.ndarray, fraction: float = 0.5):
    """Mean |x1 - target| over the final ``fraction`` of the horizon, per rollout."""
    T = states.shape[-2] - 1
    start = int(np.floor(T * (1.0 - fraction)))
    dev = np.abs(states[..., start:T, 0] - env.equilibrium_state[0])
    return dev.mean(axis=-1)
