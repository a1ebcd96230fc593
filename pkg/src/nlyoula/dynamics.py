"""Discrete-time system abstraction, RK4 discretization and the rollout engine.

All arrays are batched on leading axes: a state batch has shape ``(*batch, n)``.
Policies are functional: they expose ``initial_state(batch_shape)`` and
``step(state, y, r) -> (u, next_state)`` so closed-loop states can be copied
freely (the adversarial attacks and the audits rely on this).
"""

from __future__ import annotations

import csv
import hashlib
import zlib
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np

DEFAULT_PENALTY = 1e4
DEFAULT_STATE_BOUND = 1e6


class ConfigurationError(ValueError):
    """Raised for dimension mismatches and invalid configurations."""


class Policy(Protocol):
    input_dim: int
    output_dim: int

    def initial_state(self, batch_shape: tuple) -> Any: ...

    def step(self, state: Any, y: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, Any]: ...


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``.

    Streams never share state, so the draw for rollout ``i`` of direction ``j``
    does not depend on the order in which rollouts are scheduled.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stream_digest(seed: int, *keys) -> str:
    ss = np.random.SeedSequence([_key_to_int(seed)] + [_key_to_int(k) for k in keys])
    return hashlib.sha256(ss.generate_state(8).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian i.i.d. process and measurement noise for one rollout."""

    process_std: np.ndarray
    measurement_std: np.ndarray
    stream_id: tuple = (0,)

    def __post_init__(self):
        ps = np.atleast_1d(np.asarray(self.process_std, dtype=float))
        ms = np.atleast_1d(np.asarray(self.measurement_std, dtype=float))
        if np.any(ps < 0) or np.any(ms < 0):
            raise ConfigurationError("noise standard deviations must be >= 0")
        object.__setattr__(self, "process_std", ps)
        object.__setattr__(self, "measurement_std", ms)
        object.__setattr__(self, "stream_id", tuple(self.stream_id))

    def with_stream(self, *stream_id) -> "NoiseSpec":
        return replace(self, stream_id=tuple(stream_id))

    def zero(self) -> "NoiseSpec":
        return replace(self, process_std=np.zeros_like(self.process_std),
                       measurement_std=np.zeros_like(self.measurement_std))

    def sample(self, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(w, v)`` with shapes ``(T, n)`` and ``(T, p)``."""
        rng = stream(*self.stream_id, "noise")
        w = rng.standard_normal((horizon, self.process_std.size)) * self.process_std
        v = rng.standard_normal((horizon, self.measurement_std.size)) * self.measurement_std
        return w, v


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

def _identity_measure(x):
    return x


@dataclass(frozen=True)
class System:
    """Discrete-time plant ``x+ = step(x, u) + d_x``, ``y = measure(x) + d_y``.

    Noise is always passed explicitly by the simulator; ``step`` and
    ``measure`` are deterministic.  ``dx``/``dy`` hold optional known
    additive disturbance sequences (shape ``(T, n)``/``(T, p)`` or a constant
    vector) used for the disturbed-plant setting.
    """

    state_dim: int
    input_dim: int
    output_dim: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    measure: Callable[[np.ndarray], np.ndarray] = _identity_measure
    dt: float = 1.0
    state_bound: float = DEFAULT_STATE_BOUND
    dx: Optional[np.ndarray] = None
    dy: Optional[np.ndarray] = None
    name: str = "system"

    def disturbance(self, which: str, t: int) -> Optional[np.ndarray]:
        d = self.dx if which == "x" else self.dy
        if d is None:
            return None
        return d if d.ndim == 1 else d[t]


def rk4_step(rhs: Callable, dt: float) -> Callable:
    """Classical fixed-step Runge-Kutta map for ``xdot = rhs(x, u)``."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    half = 0.5 * dt
    sixth = dt / 6.0

    def step(x, u):
        k1 = rhs(x, u)
        k2 = rhs(x + half * k1, u)
        k3 = rhs(x + half * k2, u)
        k4 = rhs(x + dt * k3, u)
        return x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return step


def discretize(rhs: Callable, dt: float, *, state_dim: int, input_dim: int,
               measure: Optional[Callable] = None, output_dim: Optional[int] = None,
               **kwargs) -> System:
    """Wrap a continuous-time right-hand side into an RK4 :class:`System`."""
    if measure is None:
        measure, output_dim = _identity_measure, state_dim
    elif output_dim is None:
        raise ConfigurationError("output_dim is required with a custom measure")
    return System(state_dim=state_dim, input_dim=input_dim, output_dim=output_dim,
                  step=rk4_step(rhs, dt), measure=measure, dt=dt, **kwargs)


def apply_disturbance(plant: System, dx=None, dy=None) -> System:
    """Return ``plant`` with additive state/output disturbance sequences."""

    def check(d, dim, what):
        if d is None:
            return None
        d = np.asarray(d, dtype=float)
        if d.shape[-1] != dim or d.ndim > 2:
            raise ConfigurationError(f"{what} must have trailing dimension {dim}, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ConfigurationError(f"{what} must be finite")
        return d

    return replace(plant, dx=check(dx, plant.state_dim, "d_x"),
                   dy=check(dy, plant.output_dim, "d_y"))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Rollout record; arrays may carry leading batch axes."""

    states: np.ndarray          # (..., T+1, n)
    inputs: np.ndarray          # (..., T, m)
    outputs: np.ndarray         # (..., T, p)
    per_step_cost: np.ndarray   # (..., T)
    diverged: np.ndarray = field(default_factory=lambda: np.array(False))
    references: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.inputs.shape[-2]

    @property
    def cost(self) -> np.ndarray:
        return self.per_step_cost.sum(axis=-1)

    def __getitem__(self, idx) -> "Trajectory":
        return Trajectory(self.states[idx], self.inputs[idx], self.outputs[idx],
                          self.per_step_cost[idx], np.asarray(self.diverged)[idx],
                          None if self.references is None else self.references[idx])

    def to_csv(self, path) -> None:
        """Write one row per time sample; the final state row has empty u/y/cost."""
        if self.states.ndim != 2:
            raise ValueError("to_csv expects a single (unbatched) trajectory")
        n, m, p = self.states.shape[1], self.inputs.shape[1], self.outputs.shape[1]
        header = (["t"] + [f"x_{i}" for i in range(n)] + [f"u_{i}" for i in range(m)]
                  + [f"y_{i}" for i in range(p)] + ["cost"])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(self.horizon + 1):
                row = [t] + [repr(float(v)) for v in self.states[t]]
                if t < self.horizon:
                    row += [repr(float(v)) for v in self.inputs[t]]
                    row += [repr(float(v)) for v in self.outputs[t]]
                    row.append(repr(float(self.per_step_cost[t])))
                else:
                    row += [""] * (m + p + 1)
                writer.writerow(row)


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: [] for name in header}
    for row in body:
        for name, val in zip(header, row):
            cols[name].append(float(val) if val != "" else np.nan)
    return {k: np.asarray(v) for k, v in cols.items()}


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _check_dims(system: System, policy, x0) -> None:
    if x0.shape[-1] != system.state_dim:
        raise ConfigurationError(f"x0 has dimension {x0.shape[-1]}, system expects {system.state_dim}")
    if getattr(policy, "input_dim", system.output_dim) != system.output_dim:
        raise ConfigurationError(
            f"policy consumes {policy.input_dim} outputs, system produces {system.output_dim}")
    if getattr(policy, "output_dim", system.input_dim) != system.input_dim:
        raise ConfigurationError(
            f"policy produces {policy.output_dim} inputs, system expects {system.input_dim}")


def simulate(system: System, policy, x0, horizon: int, *, process_noise=None,
             measurement_noise=None, reference=None, output_attack=None, cost=None,
             penalty: float = DEFAULT_PENALTY, policy_state=None,
             return_policy_state: bool = False):
    """Vectorized closed-loop simulation.

    ``x0`` has shape ``(*batch, n)``; noise arrays ``(*batch, T, n)`` and
    ``(*batch, T, p)`` (or broadcastable).  ``reference`` is the exogenous
    input r (``(..., T, m)``), ``output_attack`` is an additive perturbation on
    the measurement seen by the policy.  The total plant input is ``u + r``.

    A trajectory whose state leaves the admissible set (non-finite or beyond
    ``system.state_bound``) is flagged diverged and charged ``penalty`` per
    remaining step.  Stage costs are also capped at ``penalty``.
    """
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    x = np.asarray(x0, dtype=float)
    _check_dims(system, policy, x)
    batch = x.shape[:-1]
    n, m, p = system.state_dim, system.input_dim, system.output_dim

    def seq(arr, dim, what):
        if arr is None:
            return None
        arr = np.asarray(arr, dtype=float)
        if arr.shape[-1] != dim or arr.shape[-2] < horizon:
            raise ConfigurationError(f"{what} has shape {arr.shape}, expected (..., {horizon}, {dim})")
        return arr

    w = seq(process_noise, n, "process noise")
    v = seq(measurement_noise, p, "measurement noise")
    r = seq(reference, m, "reference")
    a = seq(output_attack, p, "output attack")

    states = np.empty(batch + (horizon + 1, n))
    inputs = np.empty(batch + (horizon, m))
    outputs = np.empty(batch + (horizon, p))
    stage_cost = np.zeros(batch + (horizon,))
    diverged = np.zeros(batch, dtype=bool)
    ps = policy.initial_state(batch) if policy_state is None else policy_state
    zero_r = np.zeros(batch + (m,))
    states[..., 0, :] = x

    with np.errstate(all="ignore"):
        for t in range(horizon):
            y = system.measure(x)
            if v is not None:
                y = y + v[..., t, :]
            dy = system.disturbance("y", t)
            if dy is not None:
                y = y + dy
            outputs[..., t, :] = y
            if a is not None:
                y = y + a[..., t, :]
            rt = zero_r if r is None else r[..., t, :]
            u, ps = policy.step(ps, y, rt)
            u = np.broadcast_to(u, batch + (m,))
            inputs[..., t, :] = u
            if cost is not None:
                c = cost.stage(x, u)
                c = np.where(diverged | ~(c <= penalty), penalty, c)
                stage_cost[..., t] = c
            xn = system.step(x, u + rt)
            if w is not None:
                xn = xn + w[..., t, :]
            dx = system.disturbance("x", t)
            if dx is not None:
                xn = xn + dx
            bad = ~np.all(np.isfinite(xn) & (np.abs(xn) <= system.state_bound), axis=-1)
            diverged = diverged | bad
            states[..., t + 1, :] = xn
            x = xn

    traj = Trajectory(states, inputs, outputs, stage_cost, diverged,
                      None if r is None else r[..., :horizon, :])
    if return_policy_state:
        return traj, ps
    return traj


def rollout(system: System, controller, x0, noise: Optional[NoiseSpec], horizon: int, *,
            reference=None, cost=None, penalty: float = DEFAULT_PENALTY) -> Trajectory:
    """Single closed-loop rollout with noise drawn from ``noise``'s own stream."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ConfigurationError("rollout expects a single initial state")
    if noise is not None:
        if noise.process_std.size != system.state_dim or noise.measurement_std.size != system.output_dim:
            raise ConfigurationError("noise dimensions do not match the system")
        w, v = noise.sample(horizon)
    else:
        w = v = None
    return simulate(system, controller, x0, horizon, process_noise=w, measurement_noise=v,
                    reference=reference, cost=cost, penalty=penalty)


def batch_rollout(system: System, controller, initial_conditions: Sequence, noises: Sequence,
                  horizon: int, **kwargs) -> list[Trajectory]:
    """Evaluate independent rollouts one by one.

    Each rollout is computed on its own, so the result is a pure function of
    its (initial condition, noise stream) and independent of batch order.
    Diverged rollouts are recorded in their trajectory, never raised.
    """
    if len(initial_conditions) != len(noises):
        raise ConfigurationError("initial_conditions and noise seeds must have the same length")
    return [rollout(system, controller, x0, nz, horizon, **kwargs)
            for x0, nz in zip(initial_conditions, noises)]


def stack_trajectories(trajs: Sequence[Trajectory]) -> Trajectory:
    refs = None if trajs[0].references is None else np.stack([t.references for t in trajs])
    return Trajectory(np.stack([t.states for t in trajs]), np.stack([t.inputs for t in trajs]),
                      np.stack([t.outputs for t in trajs]),
                      np.stack([t.per_step_cost for t in trajs]),
                      np.array([bool(t.diverged) for t in trajs]), refs)


# ---------------------------------------------------------------------------
# Small deterministic linear algebra helpers
# ---------------------------------------------------------------------------

def small_matvec(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``M @ x`` over the last axis with a fixed summation order.

    Used for tiny gain matrices so results are bit-identical whatever the
    batch shape (BLAS kernels are not).
    """
    M = np.asarray(M, dtype=float)
    out = M[:, 0] * x[..., 0:1]
    for j in range(1, M.shape[1]):
        out = out + M[:, j] * x[..., j:j + 1]
    return out
