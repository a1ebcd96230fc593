"""Rotary-arm (Furuta) pendulum.

States ``(theta, alpha, theta_dot, alpha_dot)``: arm angle, pendulum angle
measured from the upright position, and their rates.  Input: motor voltage.
Measured: both angles.  Full Lagrangian model of an arm (inertia ``Jr`` about
its pivot) carrying a uniform rod pendulum (mass ``mp``, length ``Lp``)::

    M(alpha) [theta_dd, alpha_dd]^T = [tau - Dr theta_d - 2 Jp s c theta_d alpha_d
                                       + mp Lr l s alpha_d^2,
                                       Jp s c theta_d^2 + mp g l s - Dp alpha_d]
    M = [[Jr + mp Lr^2 + Jp s^2, mp Lr l c], [mp Lr l c, Jp]]

with ``l = Lp / 2``, ``Jp = mp Lp^2 / 3``, ``s = sin(alpha)``, ``c = cos(alpha)``
and motor torque ``tau = km (V - km theta_d) / Rm``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..dynamics import NoiseSpec, Trajectory
from .base import Environment, _per_channel, read_env_config
from .cost import CostSpec


def derived_constants(p: dict) -> dict:
    l = 0.5 * p["Lp"]
    return {
        "l": l,
        "Jp": p["mp"] * p["Lp"] ** 2 / 3.0,
        "J0": p["Jr"] + p["mp"] * p["Lr"] ** 2,
        "coup": p["mp"] * p["Lr"] * l,
        "mgl": p["mp"] * p["gravity"] * l,
    }


def pendulum_rhs_factory(p: dict, *, actuated: bool = True):
    d = derived_constants(p)
    Jp, J0, coup, mgl = d["Jp"], d["J0"], d["coup"], d["mgl"]
    Dr, Dp, km, Rm = p["Dr"], p["Dp"], p["km"], p["Rm"]

    def rhs(x, u):
        th_d, al_d = x[..., 2], x[..., 3]
        s, c = np.sin(x[..., 1]), np.cos(x[..., 1])
        if actuated:
            tau = km * (u[..., 0] - km * th_d) / Rm
        else:
            tau = 0.0
        m11 = J0 + Jp * s * s
        m12 = coup * c
        f1 = tau - Dr * th_d - 2.0 * Jp * s * c * th_d * al_d + coup * s * al_d * al_d
        f2 = Jp * s * c * th_d * th_d + mgl * s - Dp * al_d
        det = m11 * Jp - m12 * m12
        th_dd = (Jp * f1 - m12 * f2) / det
        al_dd = (m11 * f2 - m12 * f1) / det
        return np.stack([th_d, al_d, th_dd, al_dd], axis=-1)

    return rhs


def pendulum_energy(p: dict, x: np.ndarray) -> np.ndarray:
    """Total mechanical energy (kinetic + potential), zero-referenced at the pivot."""
    d = derived_constants(p)
    th_d, al_d = x[..., 2], x[..., 3]
    s, c = np.sin(x[..., 1]), np.cos(x[..., 1])
    kin = (0.5 * (d["J0"] + d["Jp"] * s * s) * th_d ** 2 + d["coup"] * c * th_d * al_d
           + 0.5 * d["Jp"] * al_d ** 2)
    return kin + d["mgl"] * c


def pendulum_measure(x):
    return x[..., 0:2]


def performance(x):
    th, al = x[..., 0], x[..., 1]
    return np.stack([np.cos(th), np.sin(th), np.cos(al), np.sin(al)], axis=-1)


def make_pendulum(config: Optional[dict] = None, overrides: Optional[dict] = None) -> Environment:
    cfg = config if config is not None else read_env_config("pendulum", overrides)
    p = cfg["physical"]
    x_eq = np.zeros(4)
    ic = cfg["initial_conditions"]
    half = np.array([ic["theta_halfwidth"], ic["alpha_halfwidth"],
                     ic["rate_halfwidth"], ic["rate_halfwidth"]])

    def sample_initial(rng, count):
        return rng.uniform(-1.0, 1.0, size=(count, 4)) * half

    noise = NoiseSpec(_per_channel(cfg["noise"]["process_std"], 4, "process_std"),
                      _per_channel(cfg["noise"]["measurement_std"], 2, "measurement_std"))
    cost = CostSpec(np.diag(cfg["cost"]["Q"]), np.diag(cfg["cost"]["R"]),
                    np.array([1.0, 0.0, 1.0, 0.0]), np.zeros(1), performance, cfg["horizon"])
    limits = None
    inp = cfg.get("input", {})
    if inp.get("clip", False):
        limits = (inp["low"], inp["high"])
    return Environment(
        name="pendulum", rhs=pendulum_rhs_factory(p), measure=pendulum_measure,
        state_dim=4, input_dim=1, output_dim=2, dt=cfg["dt"], horizon=cfg["horizon"],
        noise=noise, cost=cost, equilibrium_state=x_eq, equilibrium_input=np.zeros(1),
        nominal_estimate=np.asarray(cfg.get("estimator", {}).get("initial", [0.0, 0.0, 0.0, 0.0]),
                                    dtype=float),
        sample_initial=sample_initial, observer_chains=[[0, 2], [1, 3]], config=cfg,
        reference_bound=cfg.get("reference", {}).get("bound", 1.0), input_limits=limits,
        angle_states=(0, 1))


def pendulum_cost(trajectory: Trajectory, env: Optional[Environment] = None) -> np.ndarray:
    env = env or make_pendulum()
    return env.cost.total(trajectory)


def wrap_angle(a):
    return np.mod(a + np.pi, 2.0 * np.pi) - np.pi


def mean_angle_deviation(states: np.ndarray, fraction: float = 0.5) -> np.ndarray:
    """Mean |alpha| from vertical (radians) over the final ``fraction`` of the horizon."""
    T = states.shape[-2] - 1
    start = int(np.floor(T * (1.0 - fraction)))
    return np.abs(wrap_angle(states[..., start:T, 1])).mean(axis=-1)
