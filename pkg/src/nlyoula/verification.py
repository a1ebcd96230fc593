"""Behavioral audits of contraction, boundedness and Lipschitz properties.

Nothing here constructs contraction metrics; every check works from
simulated trajectories.  Distances below ``FLOOR`` are treated as numerical
zero and excluded from all log-fits.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .controllers import BaseController
from .dynamics import ConfigurationError, stream
from .environments import Environment
from .robustness import tree_map
from .youla import YoulaPolicy, YoulaState

FLOOR = 1e-12
FIT_LOW = 1e-10
MIN_FIT_POINTS = 3


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    rate: float
    intercept: float
    r2: float
    points: int
    status: str          # "fit", "fast" (hit the floor too quickly), "stalled"


def fit_rate(d: np.ndarray, *, start: Optional[int] = None, low: float = FIT_LOW) -> RateFit:
    """Least-squares fit of ``log d_t = c + t log(rate)``.

    Uses samples from ``start`` on (default 0) with ``low <= d_t <= d_start / 10``.
    """
    d = np.asarray(d, dtype=float)
    s = 0 if start is None else int(start)
    ref = d[s]
    t = np.arange(d.size)
    mask = (t >= s) & (d >= low) & (d <= ref / 10.0) & np.isfinite(d)
    n = int(mask.sum())
    if n < MIN_FIT_POINTS:
        tail = d[s:]
        if np.all(np.isfinite(tail)) and np.min(tail) < low:
            return RateFit(0.0, float(np.log(max(ref, FLOOR))), 1.0, n, "fast")
        return RateFit(float("nan"), float("nan"), 0.0, n, "stalled")
    tt, ld = t[mask].astype(float), np.log(d[mask])
    A = np.stack([np.ones_like(tt), tt], axis=1)
    coef, *_ = np.linalg.lstsq(A, ld, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((ld - pred) ** 2))
    ss_tot = float(np.sum((ld - ld.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(np.exp(coef[1])), float(coef[0]), r2, n, "fit")


# ---------------------------------------------------------------------------
# Contraction
# ---------------------------------------------------------------------------

@dataclass
class ContractionReport:
    rate: float
    overshoot: float
    rates: list
    r2: list
    statuses: list
    passed: bool
    degenerate: bool = False
    declared_rate: Optional[float] = None
    reasons: list = field(default_factory=list)
    log_distance: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("log_distance")
        return d


def contraction_from_distances(dist: np.ndarray, *, declared_rate: Optional[float] = None,
                               dispersion: float = 1.5, min_r2: float = 0.9,
                               rate_tol: float = 0.01) -> ContractionReport:
    """Fit a common rate and overshoot to distance series ``(pairs, T+1)``."""
    dist = np.atleast_2d(np.asarray(dist, dtype=float))
    fits = [fit_rate(d) for d in dist]
    reasons = []
    fitted = [f for f in fits if f.status == "fit"]
    stalled = [i for i, f in enumerate(fits) if f.status == "stalled"]
    if stalled:
        reasons.append(f"{len(stalled)} pair(s) never contracted below a tenth of the initial distance")
    if not fitted:
        degenerate = not stalled
        rate = 0.0 if degenerate else float("nan")
        return ContractionReport(rate, 1.0, [f.rate for f in fits], [f.r2 for f in fits],
                                 [f.status for f in fits], degenerate and not reasons, degenerate,
                                 declared_rate, reasons or ["all pairs reached the floor immediately"],
                                 np.log(np.maximum(dist, FLOOR)))
    rates = np.array([f.rate for f in fitted])
    rate = float(rates.max())
    if not rate < 1.0:
        reasons.append(f"fitted rate {rate:.4f} >= 1")
    bad_r2 = [f.r2 for f in fitted if f.r2 <= min_r2]
    if bad_r2:
        reasons.append(f"{len(bad_r2)} fit(s) with R^2 <= {min_r2}")
    if rates.min() > 0 and rate / rates.min() > dispersion:
        reasons.append(f"rate dispersion {rate / rates.min():.3f} > {dispersion}")
    if declared_rate is not None and rate > declared_rate + rate_tol:
        reasons.append(f"fitted rate {rate:.4f} exceeds declared {declared_rate}")
    # overshoot: smallest beta with d_t <= beta d_0 rate^t above the floor
    t = np.arange(dist.shape[1])
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        env_ = dist[:, :1] * np.power(max(rate, 1e-300), t)[None, :]
        ratio = np.where((dist > FLOOR) & (env_ > 0), dist / env_, 0.0)
    overshoot = float(np.nanmax(ratio)) if ratio.size else 1.0
    return ContractionReport(rate, overshoot, [f.rate for f in fits], [f.r2 for f in fits],
                             [f.status for f in fits], not reasons, False, declared_rate, reasons,
                             np.log(np.maximum(dist, FLOOR)))


def audit_contraction(run_pairs: Callable[[np.ndarray], np.ndarray], initial_pairs: np.ndarray,
                      *, distance: Optional[Callable] = None, declared_rate: Optional[float] = None,
                      dispersion: float = 1.5) -> ContractionReport:
    """Contraction audit of a system driven by shared inputs.

    ``initial_pairs`` has shape ``(N, 2, n)``; ``run_pairs`` maps it to state
    trajectories ``(N, 2, T+1, n)``, applying the same inputs (and noise) to
    both members of each pair.
    """
    traj = np.asarray(run_pairs(np.asarray(initial_pairs, dtype=float)))
    if traj.ndim != 4 or traj.shape[1] != 2:
        raise ConfigurationError("run_pairs must return an array of shape (N, 2, T+1, n)")
    if distance is None:
        dist = np.sqrt(np.sum((traj[:, 0] - traj[:, 1]) ** 2, axis=-1))
    else:
        dist = distance(traj[:, 0], traj[:, 1])
    return contraction_from_distances(dist, declared_rate=declared_rate, dispersion=dispersion)


def map_runner(step: Callable, inputs: np.ndarray):
    """``run_pairs`` for ``x+ = step(x, u)`` with a shared input sequence per pair.

    ``inputs`` is ``(N, T, m)`` or ``(T, m)``.
    """
    def run(pairs):
        x = pairs
        u = np.asarray(inputs, dtype=float)
        if u.ndim == 2:
            u = np.broadcast_to(u, (pairs.shape[0],) + u.shape)
        out = [x]
        for t in range(u.shape[-2]):
            x = step(x, u[:, None, t, :])
            out.append(x)
        return np.stack(out, axis=2)
    return run


# ---------------------------------------------------------------------------
# Lemma-style audits
# ---------------------------------------------------------------------------

@dataclass
class BoundednessReport:
    passed: bool
    sup_norm: float
    slope: float
    envelope: np.ndarray = field(repr=False)
    reasons: list = field(default_factory=list)


def audit_lemma2_boundedness(step: Callable, x0: np.ndarray, inputs: np.ndarray, *,
                             bound: float = 1e6, block: int = 50,
                             slope_tol: float = 0.05) -> BoundednessReport:
    """Bounded inputs give bounded states with no growth trend.

    Runs ``x+ = step(x, u)`` from ``x0`` (``(N, n)``) on ``inputs`` (``(N, T, m)``),
    forms the block-maximum envelope of ``|x_t|`` and fits a line to its
    second half.  Growth is flagged when the relative rise of that line
    across the half exceeds ``slope_tol`` and the slope is more than three
    standard errors above zero.
    """
    x = np.asarray(x0, dtype=float)
    u = np.asarray(inputs, dtype=float)
    norms = []
    reasons = []
    with np.errstate(all="ignore"):
        for t in range(u.shape[-2]):
            x = step(x, u[..., t, :])
            n = np.sqrt(np.sum(x * x, axis=-1))
            norms.append(n)
            if not np.all(np.isfinite(n)) or np.max(n) > bound:
                reasons.append(f"state norm exceeded {bound:g} at t={t + 1}")
                break
    norms = np.array(norms)          # (T, N)
    sup = float(np.max(norms)) if np.all(np.isfinite(norms)) else float("inf")
    T = norms.shape[0]
    nb = T // block
    if reasons or nb < 2:
        env_ = norms.max(axis=-1) if norms.size else np.zeros(0)
        if not reasons:
            reasons.append("horizon too short for the envelope test")
        return BoundednessReport(False, sup, float("nan"), env_, reasons)
    env_ = norms[:nb * block].reshape(nb, block, -1).max(axis=(1, 2))
    half = env_[nb // 2:]
    k = np.arange(half.size, dtype=float)
    slope, se = 0.0, 0.0
    if half.size > 1:
        slope, icpt = np.polyfit(k, half, 1)
        slope = float(slope)
    if half.size > 2:
        resid = half - (slope * k + icpt)
        se = float(np.sqrt(resid @ resid / (half.size - 2) / np.sum((k - k.mean()) ** 2)))
    rise = slope * max(half.size - 1, 1)
    scale = max(float(np.max(half)), 1e-12)
    # block maxima of a bounded stationary signal scatter by several percent,
    # so a rise only counts when the slope also stands clear of that scatter
    if rise > slope_tol * scale and slope > 3.0 * se:
        reasons.append(f"envelope grows by {rise:.3g} over the second half (scale {scale:.3g})")
    return BoundednessReport(not reasons, sup, slope, env_, reasons)


@dataclass
class ConvergenceReport:
    passed: bool
    state_rate: float
    output_rate: float
    allowed_rate: float
    state_fit: RateFit
    output_fit: RateFit
    reasons: list = field(default_factory=list)


def _fit_after_peak(d: np.ndarray) -> RateFit:
    return fit_rate(d, start=int(np.argmax(d)))


def audit_lemma3_convergence(step: Callable, output: Callable, x0_pair: np.ndarray,
                             u1: np.ndarray, u2: np.ndarray, *, declared_rate: float,
                             input_rate: float, tol: float = 0.05) -> ConvergenceReport:
    """Exponentially converging inputs give exponentially converging states/outputs.

    ``x0_pair`` is ``(2, n)``; ``u1, u2`` are ``(T, m)``.  Fits are taken over
    the part of each difference series after its peak; both rates must not
    exceed ``max(declared_rate, input_rate) + tol``.
    """
    x1, x2 = (np.asarray(x, dtype=float) for x in x0_pair)
    dx, dy = [np.linalg.norm(x1 - x2)], []
    for t in range(u1.shape[0]):
        dy.append(np.linalg.norm(output(x1, u1[t]) - output(x2, u2[t])))
        x1, x2 = step(x1, u1[t]), step(x2, u2[t])
        dx.append(np.linalg.norm(x1 - x2))
    dx, dy = np.array(dx), np.array(dy)
    allowed = max(declared_rate, input_rate) + tol
    fx, fy = _fit_after_peak(dx), _fit_after_peak(dy)
    reasons = []
    for name, f in (("state", fx), ("output", fy)):
        if f.status == "stalled":
            reasons.append(f"{name} difference did not converge")
        elif f.status == "fit" and f.rate > allowed:
            reasons.append(f"{name} rate {f.rate:.4f} > {allowed:.4f}")
    return ConvergenceReport(not reasons, fx.rate, fy.rate, allowed, fx, fy, reasons)


# ---------------------------------------------------------------------------
# Closed-loop audits on the environments
# ---------------------------------------------------------------------------

def flatten_state(tree) -> np.ndarray:
    leaves = []
    tree_map(lambda a: leaves.append(a) or a, tree)
    return np.concatenate(leaves, axis=-1) if leaves else None


def run_closed_loop(env: Environment, policy, x0: np.ndarray, ps0, horizon: int, *,
                    w=None, v=None, r=None):
    """Closed-loop stepping that also records the flattened policy state.

    Returns ``(x (..., T+1, n), s (..., T+1, k), z (..., T, nz))`` where ``z``
    stacks the performance variable and the applied input.
    """
    x, ps = np.asarray(x0, dtype=float), ps0
    xs, ss, zs = [x], [flatten_state(ps)], []
    batch = x.shape[:-1]
    zero = np.zeros(batch + (env.input_dim,))
    with np.errstate(all="ignore"):
        for t in range(horizon):
            y = env.measure(x)
            if v is not None:
                y = y + v[..., t, :]
            rt = zero if r is None else r[..., t, :]
            u, ps = policy.step(ps, y, rt)
            zs.append(np.concatenate([env.cost.performance(x), u + rt], axis=-1))
            x = env.system.step(x, u + rt)
            if w is not None:
                x = x + w[..., t, :]
            xs.append(x)
            ss.append(flatten_state(ps))
    S = None if ss[0] is None else np.stack(ss, axis=-2)
    return np.stack(xs, axis=-2), S, np.stack(zs, axis=-2)


def _angle_diff(env: Environment, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    if env.angle_states:
        d = d.copy()
        idx = list(env.angle_states)
        d[..., idx] = np.angle(np.exp(1j * d[..., idx]))
    return d


def _observer_blocks(policy) -> int:
    """Number of leading n-sized observer estimates in the flattened policy state."""
    if isinstance(policy, YoulaPolicy):
        return 1 if policy.innovation_observer is None else 2
    if isinstance(policy, BaseController) or hasattr(policy, "base"):
        return 1
    return 0


def stacked_state(env: Environment, policy, xs: np.ndarray, ss: Optional[np.ndarray]) -> np.ndarray:
    """``(x, x - xh, [x - xh_i], rest)``: the closed-loop state in error coordinates."""
    n = env.state_dim
    parts = [xs]
    k = 0
    if ss is not None:
        for _ in range(_observer_blocks(policy)):
            parts.append(_angle_diff(env, xs, ss[..., k:k + n]))
            k += n
        if k < ss.shape[-1]:
            parts.append(ss[..., k:])
    return np.concatenate(parts, axis=-1)


def _random_policy_state(policy, X0: np.ndarray, env: Environment, rng, spread: float, box):
    """Policy state with observer estimates scattered around the nominal estimate
    and the remaining (Youla / network) state scattered around zero."""
    B = X0.shape[0]
    ps = policy.initial_state((B,))
    n = env.state_dim
    nb = _observer_blocks(policy)
    flat = flatten_state(ps)
    if flat is None:
        return ps
    flat = flat.copy()
    flat[..., :nb * n] += np.tile(box, nb) * rng.uniform(-1, 1, size=(B, nb * n))
    flat[..., nb * n:] += spread * rng.standard_normal((B, flat.shape[-1] - nb * n))
    return unflatten_state(ps, flat)


def unflatten_state(template, flat: np.ndarray):
    pos = [0]

    def take(a):
        k = a.shape[-1]
        out = flat[..., pos[0]:pos[0] + k].reshape(a.shape)
        pos[0] += k
        return out
    return tree_map(take, template)


@dataclass
class Theorem1Report:
    passed: bool
    contraction: ContractionReport
    gain: float
    gain_half: float
    gain_stable: bool
    reasons: list = field(default_factory=list)


def closed_loop_pairs(env: Environment, policy, *, pairs: int = 8, horizon: int = 300,
                      seed: int = 0, spread: float = 0.01, noise: bool = True):
    """Distance series of the stacked closed-loop state for pairs of rollouts.

    Pair members share noise.  Their plant states differ by up to ``spread``
    of the initial-state box, observer estimates are scattered independently
    within ``spread`` of the box around the nominal estimate and other policy
    states get independent Gaussian offsets of size ``spread``.
    """
    rng = stream(seed, "theorem1")
    x0 = env.initial_conditions(seed, "theorem1", count=pairs)
    box = np.abs(env.initial_conditions(seed, "box", count=256) - env.equilibrium_state).max(axis=0)
    x0b = x0 + spread * box * rng.uniform(-1, 1, size=x0.shape)
    X0 = np.concatenate([x0, x0b])
    ps = _random_policy_state(policy, X0, env, rng, spread, spread * box)
    if noise:
        w, v = env.noise_batch(seed, "theorem1", count=pairs, horizon=horizon)
        w, v = np.concatenate([w, w]), np.concatenate([v, v])
    else:
        w = v = None
    xs, ss, _ = run_closed_loop(env, policy, X0, ps, horizon, w=w, v=v)
    z = stacked_state(env, policy, xs, ss)
    n = env.state_dim
    d = z[:pairs] - z[pairs:]
    d[..., :n] = _angle_diff(env, xs[:pairs], xs[pairs:])
    with np.errstate(over="ignore", invalid="ignore"):
        return np.sqrt(np.sum(d * d, axis=-1))


def reference_gain(env: Environment, policy, *, probes: int = 40, horizon: Optional[int] = None,
                   amplitude: Optional[float] = None, seed: int = 0) -> np.ndarray:
    """Running maximum of ``|z1 - z2| / |r1 - r2|`` over probe pairs.

    Both members share initial state, policy state and noise.
    """
    T = env.horizon if horizon is None else horizon
    amp = 0.1 * env.reference_bound if amplitude is None else amplitude
    rng = stream(seed, "reference-gain")
    x0 = env.initial_conditions(seed, "reference-gain", count=1)[0]
    w, v = env.noise_batch(seed, "reference-gain", count=1, horizon=T)
    r1 = amp * rng.uniform(-1, 1, size=(probes, T, env.input_dim))
    r2 = amp * rng.uniform(-1, 1, size=(probes, T, env.input_dim))
    X0 = np.broadcast_to(x0, (2 * probes, x0.size)).copy()
    W = np.broadcast_to(w[0], (2 * probes,) + w.shape[1:])
    V = np.broadcast_to(v[0], (2 * probes,) + v.shape[1:])
    _, _, z = run_closed_loop(env, policy, X0, policy.initial_state((2 * probes,)), T,
                              w=W, v=V, r=np.concatenate([r1, r2]))
    with np.errstate(over="ignore", invalid="ignore"):
        dz = z[:probes] - z[probes:]
        num = np.sqrt(np.sum(dz * dz, axis=(-1, -2)))
    den = np.sqrt(np.sum((r1 - r2) ** 2, axis=(-1, -2)))
    ratio = np.where(np.isfinite(num), num / den, np.inf)
    return np.maximum.accumulate(ratio)


def audit_horizon(env: Environment) -> int:
    return int(env.config.get("audit", {}).get("horizon", 3 * env.horizon))


def audit_theorem1(env: Environment, policy, *, pairs: int = 8, horizon: Optional[int] = None,
                   probes: int = 40, seed: int = 0, dispersion: float = 1.5,
                   gain_growth: float = 0.5) -> Theorem1Report:
    """Contraction of the stacked closed loop plus a finite, stable r -> z gain."""
    horizon = audit_horizon(env) if horizon is None else horizon
    dist = closed_loop_pairs(env, policy, pairs=pairs, horizon=horizon, seed=seed)
    rep = contraction_from_distances(dist, dispersion=dispersion)
    running = reference_gain(env, policy, probes=probes, seed=seed)
    gain, half = float(running[-1]), float(running[len(running) // 2 - 1])
    stable = bool(np.isfinite(gain) and gain <= (1.0 + gain_growth) * half)
    reasons = list(rep.reasons)
    if not np.isfinite(gain):
        reasons.append("reference-to-performance gain is not finite")
    elif not stable:
        reasons.append(f"gain estimate still growing ({half:.4g} -> {gain:.4g})")
    return Theorem1Report(rep.passed and np.isfinite(gain) and stable, rep, gain, half, stable,
                          reasons)


def audit_observer(env: Environment, observer, *, samples: int = 1000, seed: int = 0) -> dict:
    """Plant trajectories solve the observer: ``f(x, u) == f_o(x, u, c(x))``."""
    rng = stream(seed, "observer-audit")
    x = env.initial_conditions(seed, "observer-audit", count=samples)
    u = env.equilibrium_input + rng.uniform(-1, 1, size=(samples, env.input_dim))
    err = np.abs(env.system.step(x, u) - observer.predict(x, u, env.measure(x)))
    return {"max_error": float(np.max(err)), "passed": bool(np.max(err) < 1e-12)}


def audit_observer_contraction(env: Environment, observer, *, pairs: int = 8,
                               horizon: Optional[int] = None, seed: int = 0,
                               spread: float = 0.5) -> ContractionReport:
    """Two observer copies fed identical ``(ubar, y)`` forget their initial estimates.

    The driving signals come from noisy base closed-loop rollouts; the copies
    start at the nominal estimate and at a point scattered by ``spread`` of
    the initial-state box.
    """
    T = env.horizon if horizon is None else horizon
    base = BaseController(observer, _feedback_for(env))
    x = env.initial_conditions(seed, "observer-pairs", count=pairs)
    w, v = env.noise_batch(seed, "observer-pairs", count=pairs, horizon=T)
    box = np.abs(env.initial_conditions(seed, "box", count=256) - env.equilibrium_state).max(axis=0)
    rng = stream(seed, "observer-pairs")
    xa = base.initial_state((pairs,))
    xb = xa + spread * box * rng.uniform(-1, 1, size=xa.shape)
    da = [_angle_diff(env, xa, xb)]
    with np.errstate(all="ignore"):
        for t in range(T):
            y = env.measure(x) + v[:, t]
            u = base.feedback(xa)
            xa = observer.predict(xa, u, y)
            xb = observer.predict(xb, u, y)
            x = env.system.step(x, u) + w[:, t]
            da.append(_angle_diff(env, xa, xb))
    d = np.stack(da, axis=1)
    return contraction_from_distances(np.sqrt(np.sum(d * d, axis=-1)))


def _feedback_for(env: Environment):
    from .controllers import make_feedback
    return make_feedback(env)


def environment_audit(env: Environment, *, seed: int = 0, innovation_observer=None) -> dict:
    """Audit the shipped base controller before training.

    A1: the base closed loop contracts and has a finite reference gain.
    A2: the observer (and the innovations observer) replicate the plant.
    A3: the observer forgets its initial estimate under shared data.
    """
    from .controllers import make_base_controller
    base = make_base_controller(env)
    a1 = audit_theorem1(env, base, seed=seed)
    observers = {"base": base.observer}
    if innovation_observer is not None:
        observers["innovation"] = innovation_observer
    a2 = {k: audit_observer(env, o, seed=seed) for k, o in observers.items()}
    a3 = {k: audit_observer_contraction(env, o, seed=seed) for k, o in observers.items()}
    out = {
        "environment": env.name,
        "A1": {"passed": bool(a1.passed), "rate": a1.contraction.rate, "gain": a1.gain,
               "reasons": a1.reasons},
        "A2": a2,
        "A3": {k: {"passed": bool(r.passed), "rate": r.rate, "reasons": r.reasons}
               for k, r in a3.items()},
    }
    out["passed"] = bool(a1.passed and all(r["passed"] for r in a2.values())
                         and all(r.passed for r in a3.values()))
    return out


# ---------------------------------------------------------------------------
# Example: disturbed closed loop with several limit solutions
# ---------------------------------------------------------------------------

def example1_step(x, xh, d):
    """Scalar plant and observer-based controller of the counterexample."""
    u = 10.0 * (x - xh)
    return 0.5 * np.sin(x) + u + d, 0.5 * np.sin(xh) + u


def example1_run(x0, xh0, d: float, horizon: int = 200):
    x, xh = np.asarray(x0, dtype=float), np.asarray(xh0, dtype=float)
    xs = [x]
    for _ in range(horizon):
        x, xh = example1_step(x, xh, d)
        xs.append(x)
    return np.stack(xs)


@dataclass
class Example1Report:
    converged_gap: float           # |x1 - x2| at the horizon with d = 0
    separation: float              # min |x1 - x2| over the second half with d = 1
    sup_norm: float                # max |x| over all disturbed runs
    pair_undisturbed: tuple
    pair_disturbed: tuple
    passed: bool


def example1_counterexample(horizon: int = 200, grid: int = 61, width: float = 3.0) -> Example1Report:
    """Contracting without disturbance, several limit solutions with ``d = 1``.

    The disturbed pair is found by a deterministic grid search over initial
    (plant, estimate) values: the candidate whose solution stays farthest from
    the one started at the origin over the second half of the horizon.
    """
    a0 = example1_run(0.0, 0.0, 0.0, horizon)
    b0 = example1_run(1.0, -1.0, 0.0, horizon)
    gap = float(abs(a0[-1] - b0[-1]))
    g = np.linspace(-width, width, grid)
    X, XH = (m.ravel() for m in np.meshgrid(g, g))
    ref = example1_run(0.0, 0.0, 1.0, horizon)
    cand = example1_run(X, XH, 1.0, horizon)
    half = horizon // 2
    sep = np.abs(cand[half:] - ref[half:, None]).min(axis=0)
    i = int(np.argmax(sep))
    sup = float(max(np.abs(cand).max(), np.abs(ref).max()))
    sepv = float(sep[i])
    return Example1Report(gap, sepv, sup, ((0.0, 0.0), (1.0, -1.0)),
                          ((0.0, 0.0), (float(X[i]), float(XH[i]))),
                          gap < 1e-6 and sepv > 0.1 and np.isfinite(sup))


def report_json(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        return str(o)
    return json.dumps(obj, default=default, indent=2, sort_keys=True)
