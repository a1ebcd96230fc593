"""Base controllers: high-gain observers and state-feedback laws.

The observer predictor is ``f_o(xh, u, y) = f(xh, u) + L (y - c(xh))`` with
``f`` the plant's own discrete map, so the correction vanishes identically
when fed the true state's measurement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import ConfigurationError, small_matvec
from .environments.base import Environment
from .environments.pendulum import derived_constants, wrap_angle


class ObserverDesignError(ConfigurationError):
    pass


class RiccatiError(ConfigurationError):
    pass


class ControllerAuditError(ConfigurationError):
    pass


# ---------------------------------------------------------------------------
# Linearization and Riccati
# ---------------------------------------------------------------------------

def linearize(step: Callable, x0: np.ndarray, u0: np.ndarray, h: float = 1e-6):
    """Central-difference Jacobians ``(A, B)`` of a discrete map at ``(x0, u0)``."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n, m = x0.size, u0.size
    k = np.asarray(step(x0, u0)).size
    A = np.empty((k, n))
    B = np.empty((k, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        A[:, i] = (step(x0 + e, u0) - step(x0 - e, u0)) / (2 * h)
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        B[:, j] = (step(x0, u0 + e) - step(x0, u0 - e)) / (2 * h)
    return A, B


def solve_dare(A, B, Q, R, *, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Stabilizing solution of ``P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q``.

    Structure-preserving doubling; converges quadratically when (A, B) is
    stabilizable and (A, Q^1/2) detectable.
    """
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    I = np.eye(n)
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    for _ in range(max_iter):
        W = np.linalg.solve(I + Gk @ Hk, np.hstack([Ak, Gk]))
        WA, WG = W[:, :n], W[:, n:]
        with np.errstate(over="ignore", invalid="ignore"):
            H_next = Hk + Ak.T @ Hk @ WA
            G_next = Gk + Ak @ WG @ Ak.T
            A_next = Ak @ WA
        if not np.isfinite(np.linalg.norm(H_next)):
            raise RiccatiError("Riccati doubling diverged (non-stabilizable linearization?)")
        delta = np.linalg.norm(H_next - Hk) / max(1.0, np.linalg.norm(H_next))
        Ak, Gk, Hk = A_next, 0.5 * (G_next + G_next.T), 0.5 * (H_next + H_next.T)
        if delta < tol:
            break
    else:
        raise RiccatiError("Riccati doubling did not converge")
    P = Hk
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        raise RiccatiError("Riccati solution is not stabilizing")
    return P


def dare_residual(A, B, Q, R, P) -> float:
    """Relative residual ``|res|_F / max(1, |P|_F)`` of the discrete Riccati equation."""
    BtPA = B.T @ P @ A
    res = A.T @ P @ A - P - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return float(np.linalg.norm(res) / max(1.0, np.linalg.norm(P)))


def dlqr(A, B, Q, R):
    P = solve_dare(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


# ---------------------------------------------------------------------------
# Observers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observer:
    """Discrete observer ``xh+ = f(xh, ubar) + L (y - c(xh))``."""

    step: Callable
    measure: Callable
    gain: np.ndarray
    initial: np.ndarray
    eps: float = float("nan")
    rate: float = float("nan")   # spectral radius of the linearized error dynamics

    @property
    def state_dim(self) -> int:
        return self.gain.shape[0]

    def predict(self, xh: np.ndarray, ubar: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.step(xh, ubar) + small_matvec(self.gain, y - self.measure(xh))

    def initial_state(self, batch_shape: tuple) -> np.ndarray:
        return np.broadcast_to(self.initial, tuple(batch_shape) + self.initial.shape).copy()


def observer_gain(env: Environment, gain_eps: float, output_gains) -> np.ndarray:
    n, p = env.state_dim, env.output_dim
    L = np.zeros((n, p))
    for j, chain in enumerate(env.observer_chains):
        alphas = output_gains[j]
        if len(alphas) != len(chain):
            raise ObserverDesignError(
                f"output {j} observes {len(chain)} states but {len(alphas)} gains were given")
        for k, (state, alpha) in enumerate(zip(chain, alphas)):
            L[state, j] = env.dt * alpha / gain_eps ** (k + 1)
    return L


def high_gain_observer(env: Environment, gain_eps: Optional[float] = None,
                       output_gains=None) -> Observer:
    """High-gain observer; correction gains scale with powers of ``1/gain_eps``."""
    ocfg = env.config.get("observer", {})
    gain_eps = ocfg["eps"] if gain_eps is None else gain_eps
    output_gains = ocfg["gains"] if output_gains is None else output_gains
    if not gain_eps > 0:
        raise ObserverDesignError("gain_eps must be positive")
    L = observer_gain(env, gain_eps, output_gains)
    A, _ = linearize(env.system.step, env.equilibrium_state, env.equilibrium_input)
    C, _ = linearize(lambda x, u: env.measure(x), env.equilibrium_state, env.equilibrium_input)
    rho = float(np.max(np.abs(np.linalg.eigvals(A - L @ C))))
    if not rho < 1.0:
        raise ObserverDesignError(
            f"observer error dynamics diverge on the linearization (spectral radius {rho:.4f}, "
            f"eps={gain_eps})")
    return Observer(env.system.step, env.measure, L, env.nominal_estimate.copy(),
                    eps=gain_eps, rate=rho)


def detuned_observer(env: Environment, slow_factor: Optional[float] = None) -> Observer:
    """The base observer with its high-gain parameter multiplied by ``slow_factor``."""
    if slow_factor is None:
        slow_factor = env.config.get("observer", {}).get("innovation_slow_factor", 1.0)
    if slow_factor < 1:
        raise ObserverDesignError("slow_factor must be >= 1")
    return high_gain_observer(env, env.config["observer"]["eps"] * slow_factor)


# ---------------------------------------------------------------------------
# State feedback
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateFeedback:
    law: Callable[[np.ndarray], np.ndarray]
    lipschitz: float = float("nan")
    info: dict = field(default_factory=dict)

    def __call__(self, xh: np.ndarray) -> np.ndarray:
        return self.law(xh)


def sampled_lipschitz(law: Callable, lo: np.ndarray, hi: np.ndarray, *, pairs: int = 2000,
                      radius: float = 1e-3, seed: int = 0) -> float:
    """Largest ``|k(a) - k(b)| / |a - b|`` over random nearby pairs in a box."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(lo, hi, size=(pairs, lo.size))
    d = rng.standard_normal(a.shape)
    d *= (radius * (hi - lo)) / np.linalg.norm(d, axis=-1, keepdims=True)
    b = a + d
    num = np.linalg.norm(law(a) - law(b), axis=-1)
    den = np.linalg.norm(a - b, axis=-1)
    return float(np.max(num / den))


def maglev_feedback(env: Environment, gains: Optional[dict] = None) -> StateFeedback:
    """Cascaded nonlinear law: desired acceleration -> desired current -> voltage.

    The position loop requests ``a_d = -k1 (x1 - r) - k2 x2``; the magnetic
    force model is inverted for the current ``i_d`` producing it, and the
    voltage cancels the back-emf/resistive terms while driving ``x3 -> i_d``.
    """
    p = env.config["physical"]
    g = dict(env.config["feedback"])
    g.update(gains or {})
    k1, k2, k3 = g["position_gain"], g["velocity_gain"], g["current_gain"]
    m, fr, grav = p["mass"], p["friction"], p["gravity"]
    a, L0, L1, R = p["a"], p["L0"], p["L1"], p["resistance"]
    L0a = L0 * a
    target = p["target_position"]
    floor = g["current_floor_fraction"] * grav
    smin = 0.2 * a

    def law(xh):
        x1, x2, x3 = xh[..., 0], xh[..., 1], xh[..., 2]
        s = np.maximum(a + x1, smin)
        acc = -k1 * (x1 - target) - k2 * x2
        need = np.maximum(grav - (fr / m) * x2 - acc, floor)
        i_d = s * np.sqrt(2.0 * m * need / L0a)
        ind = L1 + L0a / s
        v = R * x3 - L0a * x2 * x3 / (s * s) - ind * k3 * (x3 - i_d)
        return v[..., None]

    x_eq = env.equilibrium_state
    span = np.array([0.03, 0.3, 0.4 * x_eq[2]])
    lip = sampled_lipschitz(law, x_eq - span, x_eq + span)
    return StateFeedback(law, lip, {"type": "maglev", **{k: g[k] for k in sorted(g)}})


def pendulum_swingup_lqr(env: Environment, gains: Optional[dict] = None) -> StateFeedback:
    """Energy pumping far from upright, discrete LQR near it, smoothly blended.

    The swing-up law commands an arm acceleration proportional to the energy
    error, ``mu (E - E_target) tanh(alpha_dot cos(alpha) / delta)``, minus
    ``arm_damping`` times the arm rate, saturated at ``accel_limit`` and
    converted to a voltage through the inverse dynamics.
    The LQR weight is 1 inside ``balance_angle - width/2`` and 0 beyond
    ``balance_angle + width/2`` (cosine ramp in between), which keeps the law
    a static Lipschitz map while preventing chattering at the boundary.  The
    blended voltage is saturated at ``voltage_limit``.
    """
    p = env.config["physical"]
    g = dict(env.config["feedback"])
    g.update(gains or {})
    d = derived_constants(p)
    Jp, J0, coup, mgl = d["Jp"], d["J0"], d["coup"], d["mgl"]
    Dr, Dp, km, Rm = p["Dr"], p["Dp"], p["km"], p["Rm"]
    A, B = linearize(env.system.step, env.equilibrium_state, env.equilibrium_input)
    Qw = np.diag(np.asarray(g["lqr_state_weights"], dtype=float))
    Rw = np.atleast_2d(float(g["lqr_input_weight"]))
    K, P = dlqr(A, B, Qw, Rw)
    lo = np.deg2rad(g["balance_angle_deg"] - 0.5 * g["blend_width_deg"])
    hi = np.deg2rad(g["balance_angle_deg"] + 0.5 * g["blend_width_deg"])
    mu, delta = g["energy_gain"], g["energy_smoothing"]
    e_target, amax, vmax = g["energy_target"], g["accel_limit"], g["voltage_limit"]
    arm_damping = g["arm_damping"]
    Kvec = K[0]

    def law(xh):
        th, al = wrap_angle(xh[..., 0]), wrap_angle(xh[..., 1])
        th_d, al_d = xh[..., 2], xh[..., 3]
        s, c = np.sin(al), np.cos(al)
        u_lqr = -(Kvec[0] * th + Kvec[1] * al + Kvec[2] * th_d + Kvec[3] * al_d)
        energy = 0.5 * Jp * al_d * al_d + mgl * (c - 1.0)
        acc = mu * (energy - e_target) * np.tanh(al_d * c / delta) - arm_damping * th_d
        acc = np.clip(acc, -amax, amax)
        # torque that produces the commanded arm acceleration
        m12 = coup * c
        f2 = Jp * s * c * th_d * th_d + mgl * s - Dp * al_d
        rest = -Dr * th_d - 2.0 * Jp * s * c * th_d * al_d + coup * s * al_d * al_d
        tau = (J0 + Jp * s * s) * acc + m12 * (f2 - m12 * acc) / Jp - rest
        u_swing = Rm * tau / km + km * th_d
        frac = np.clip((np.abs(al) - lo) / (hi - lo), 0.0, 1.0)
        w = 0.5 * (1.0 + np.cos(np.pi * frac))
        return np.clip(w * u_lqr + (1.0 - w) * u_swing, -vmax, vmax)[..., None]

    lip = sampled_lipschitz(law, np.array([-1.0, -np.pi + 0.01, -5.0, -10.0]),
                            np.array([1.0, np.pi - 0.01, 5.0, 10.0]))
    info = {"type": "pendulum", "K": K.tolist(), "P": P.tolist(), "A": A.tolist(),
            "B": B.tolist(), "Q": Qw.tolist(), "R": Rw.tolist(),
            **{k: g[k] for k in sorted(g)}}
    return StateFeedback(law, lip, info)


# ---------------------------------------------------------------------------
# Base controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaseController:
    """Observer plus state feedback; policy state is the estimate ``xh``."""

    observer: Observer
    feedback: StateFeedback

    @property
    def input_dim(self) -> int:
        return self.observer.gain.shape[1]

    @property
    def output_dim(self) -> int:
        return 1

    def initial_state(self, batch_shape: tuple):
        return self.observer.initial_state(batch_shape)

    def step(self, xh, y, r):
        u = self.feedback(xh)
        return u, self.observer.predict(xh, u + r, y)


def make_feedback(env: Environment, gains: Optional[dict] = None) -> StateFeedback:
    if env.name == "maglev":
        return maglev_feedback(env, gains)
    if env.name == "pendulum":
        return pendulum_swingup_lqr(env, gains)
    raise ConfigurationError(f"no feedback law for environment {env.name!r}")


def make_base_controller(env: Environment) -> BaseController:
    return BaseController(high_gain_observer(env), make_feedback(env))


def gain_set(env: Environment, base: BaseController) -> dict:
    """Serializable description of the shipped gains."""
    return {
        "environment": env.name,
        "observer": {"eps": base.observer.eps, "L": base.observer.gain.tolist(),
                     "linearized_rate": base.observer.rate},
        "feedback": {"lipschitz_estimate": base.feedback.lipschitz, **base.feedback.info},
    }


def dump_gain_set(env: Environment, base: BaseController) -> str:
    return json.dumps(gain_set(env, base), indent=2, sort_keys=True)
