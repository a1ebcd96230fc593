"""Adversarial measurement attacks and critical attack sizes.

The adversary adds ``a_t`` with ``|a_t|_2 <= eps`` to the measurement fed to
the policy.  At each step it optimizes the next ``window`` perturbations by
simultaneous-perturbation (SPSA) ascent on the windowed cost, starting from
the current closed-loop state and knowing the noise realization, applies the
first one and recedes.  The zero attack and the shifted previous plan are
always among the candidates, so the attacked cost never falls below the
clean one along the chosen path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ConfigurationError, System, simulate, stream
from .environments import Environment
from .environments.maglev import mean_position_deviation
from .environments.pendulum import mean_angle_deviation


# ---------------------------------------------------------------------------
# Policy-state plumbing
# ---------------------------------------------------------------------------

def tree_map(fn: Callable, tree):
    """Apply ``fn`` to every array leaf of a policy state."""
    if tree is None:
        return None
    if isinstance(tree, np.ndarray):
        return fn(tree)
    if dataclasses.is_dataclass(tree):
        return type(tree)(**{f.name: tree_map(fn, getattr(tree, f.name))
                             for f in dataclasses.fields(tree)})
    if isinstance(tree, (tuple, list)):
        return type(tree)(tree_map(fn, t) for t in tree)
    if isinstance(tree, dict):
        return {k: tree_map(fn, v) for k, v in tree.items()}
    return tree


def _tile(tree, copies: int):
    return tree_map(lambda a: np.broadcast_to(a, (copies,) + a.shape).copy(), tree)


def _take(tree, index):
    return tree_map(lambda a: a[index], tree)


# ---------------------------------------------------------------------------
# Attack setting
# ---------------------------------------------------------------------------

@dataclass
class AttackSetting:
    """A batch of scenarios: plant, cost, initial states and noise."""

    system: System
    cost: object
    x0: np.ndarray                 # (B, n)
    horizon: int
    w: Optional[np.ndarray] = None  # (B, T, n)
    v: Optional[np.ndarray] = None  # (B, T, p)

    @property
    def batch(self) -> int:
        return self.x0.shape[0]


def env_setting(env: Environment, seed: int, *keys, count: int) -> AttackSetting:
    x0 = env.initial_conditions(seed, "attack", *keys, count=count)
    w, v = env.noise_batch(seed, "attack", *keys, count=count)
    return AttackSetting(env.system, env.cost, x0, env.horizon, w, v)


def clean_rollout(setting: AttackSetting, policy):
    return simulate(setting.system, policy, setting.x0, setting.horizon, process_noise=setting.w,
                    measurement_noise=setting.v, cost=setting.cost)


def project_ball(a: np.ndarray, eps: float) -> np.ndarray:
    """Scale each time slot (last axis) into the l2 ball of radius ``eps``."""
    if eps <= 0:
        return np.zeros_like(a)
    n = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    return a * np.minimum(1.0, eps / np.maximum(n, 1e-300))


@dataclass(frozen=True)
class SpsaConfig:
    window: int = 10
    iterations: int = 4
    perturbation: float = 0.5      # probe size, relative to eps
    step: float = 0.5              # ascent step per slot, relative to eps
    seed: int = 0


@dataclass
class AttackResult:
    eps: float
    attack: np.ndarray             # (B, T, p)
    trajectory: object
    mean_cost: float
    clean_cost: float

    @property
    def max_slot_norm(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.attack ** 2, axis=-1)))) if self.attack.size else 0.0


def _window_cost(setting, policy, x, ps, t, W, attacks):
    """Cost of ``W`` steps from ``(x, ps)`` at time ``t`` under candidate attacks.

    ``attacks`` has shape ``(C, B, W, p)``; the closed-loop state is tiled.
    """
    C = attacks.shape[0]
    xs = np.broadcast_to(x, (C,) + x.shape).copy()
    pss = _tile(ps, C)
    w = None if setting.w is None else setting.w[:, t:t + W]
    v = None if setting.v is None else setting.v[:, t:t + W]
    tr = simulate(setting.system, policy, xs, W, process_noise=w, measurement_noise=v,
                  output_attack=attacks, cost=setting.cost, policy_state=pss)
    return tr.per_step_cost.sum(axis=-1)          # (C, B)


def synthesize_attack(setting: AttackSetting, policy, eps: float,
                      cfg: SpsaConfig = SpsaConfig()) -> AttackResult:
    """Receding-horizon SPSA attack on the measurement channel."""
    if eps < 0:
        raise ConfigurationError("attack size must be non-negative")
    clean = clean_rollout(setting, policy)
    B, T = setting.batch, setting.horizon
    p = setting.system.output_dim
    if eps == 0:
        return AttackResult(0.0, np.zeros((B, T, p)), clean, float(clean.cost.mean()),
                            float(clean.cost.mean()))

    rng = stream(cfg.seed, "spsa", repr(float(eps)))
    x = np.asarray(setting.x0, dtype=float)
    ps = policy.initial_state((B,))
    plan = np.zeros((B, cfg.window, p))
    applied = np.zeros((B, T, p))
    for t in range(T):
        W = min(cfg.window, T - t)
        warm = np.zeros((B, W, p))
        warm[:, :W - 1] = plan[:, 1:W]
        # zero, the shifted previous plan, and constant biases along each output
        bias = np.concatenate([np.eye(p), -np.eye(p)]) * eps
        cands = np.concatenate([np.zeros((1, B, W, p)), warm[None],
                                np.broadcast_to(bias[:, None, None, :], (2 * p, B, W, p))])
        J = _window_cost(setting, policy, x, ps, t, W, cands)
        pick = J.argmax(axis=0)
        best_J = J.max(axis=0)
        best = cands[pick, np.arange(B)]
        # ascend from the best candidate unless it is the zero attack
        a = np.where((pick == 0)[:, None, None],
                     project_ball(rng.standard_normal(best.shape) * eps, eps), best)
        G = np.zeros_like(a)
        for _ in range(cfg.iterations):
            delta = rng.choice(np.array([-1.0, 1.0]), size=a.shape)
            c = cfg.perturbation * eps
            probe = np.stack([project_ball(a + c * delta, eps), project_ball(a - c * delta, eps)])
            Jp = _window_cost(setting, policy, x, ps, t, W, probe)
            for k in range(2):
                better = Jp[k] > best_J
                best = np.where(better[:, None, None], probe[k], best)
                best_J = np.where(better, Jp[k], best_J)
            # accumulate the estimates; a single SPSA draw is mostly noise per slot
            G = G + ((Jp[0] - Jp[1]) / (2.0 * c))[:, None, None] * delta
            # normalize over the whole window so per-slot magnitudes survive
            gn = np.sqrt(np.mean(np.sum(G * G, axis=-1), axis=-1))[:, None, None]
            a = project_ball(a + cfg.step * eps * G / np.maximum(gn, 1e-300), eps)
        # the cost is typically convex in the attack, so also try the ascent
        # direction pushed out to the boundary of the ball
        n = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
        sat = np.where(n > 0, eps * a / np.maximum(n, 1e-300), 0.0)
        final = np.stack([a, sat])
        Jf = _window_cost(setting, policy, x, ps, t, W, final)
        for k in range(2):
            better = Jf[k] > best_J
            best = np.where(better[:, None, None], final[k], best)
            best_J = np.where(better, Jf[k], best_J)
        # the applied slot matters most: try it at each vertex of the ball
        # along the output axes with the rest of the plan held
        heads = np.repeat(best[None], 2 * p, axis=0)
        heads[:, :, 0] = bias[:, None, :]
        Jh = _window_cost(setting, policy, x, ps, t, W, heads)
        for k in range(2 * p):
            better = Jh[k] > best_J
            best = np.where(better[:, None, None], heads[k], best)
            best_J = np.where(better, Jh[k], best_J)
        plan = np.zeros((B, cfg.window, p))
        plan[:, :W] = best
        applied[:, t] = best[:, 0]
        # advance the true closed loop one step with the chosen perturbation
        tr, ps = simulate(setting.system, policy, x, 1,
                          process_noise=None if setting.w is None else setting.w[:, t:t + 1],
                          measurement_noise=None if setting.v is None else setting.v[:, t:t + 1],
                          output_attack=applied[:, t:t + 1], cost=setting.cost, policy_state=ps,
                          return_policy_state=True)
        x = tr.states[:, -1]
    attacked = simulate(setting.system, policy, setting.x0, T, process_noise=setting.w,
                        measurement_noise=setting.v, output_attack=applied, cost=setting.cost)
    return AttackResult(float(eps), applied, attacked, float(attacked.cost.mean()),
                        float(clean.cost.mean()))


# ---------------------------------------------------------------------------
# Critical attack size
# ---------------------------------------------------------------------------

def task_deviation(env: Environment, states: np.ndarray, fraction: float = 0.5) -> float:
    """Batch-mean tracking deviation over the final ``fraction`` of the horizon."""
    if env.name == "maglev":
        dev = mean_position_deviation(env, states, fraction)
    elif env.name == "pendulum":
        dev = mean_angle_deviation(states, fraction)
    else:
        raise ConfigurationError(f"no deviation criterion for {env.name!r}")
    # a diverged rollout has left the region of interest
    return float(np.mean(np.where(np.isfinite(dev), dev, np.inf)))


def task_threshold(env: Environment) -> float:
    crit = env.config.get("attack", {})
    if env.name == "maglev":
        return float(crit.get("deviation_threshold", 0.01))
    if env.name == "pendulum":
        return float(np.deg2rad(crit.get("deviation_threshold_deg", 30.0)))
    raise ConfigurationError(f"no deviation criterion for {env.name!r}")


def bisect_threshold(criterion: Callable[[float], bool], lo: float, hi: float, *,
                     iterations: int = 8, expand: int = 4):
    """Smallest ``eps`` in ``[lo, hi]`` with ``criterion(eps)`` true, by bisection.

    ``criterion(lo)`` must be false.  If ``criterion(hi)`` is false the range is
    doubled up to ``expand`` times; returns ``(estimate, censored, evaluations)``
    where ``censored`` means the criterion never triggered.
    """
    evals = {}

    def crit(e):
        if e not in evals:
            evals[e] = bool(criterion(e))
        return evals[e]

    for _ in range(expand + 1):
        if crit(hi):
            break
        lo, hi = hi, 2.0 * hi
    else:
        return lo, True, evals
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if crit(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi), False, evals


@dataclass
class CriticalAttackResult:
    policy_id: str
    critical_eps: float
    censored: bool
    criterion: str
    threshold: float
    curve: list = field(default_factory=list)    # (eps, mean_norm_cost, deviation, envelope, hit)
    seeds: list = field(default_factory=list)


def critical_attack_size(env: Environment, policy, *, policy_id: str = "policy",
                         eps_range: Sequence[float] = (0.0, 1.0), iterations: int = 8,
                         batch: int = 20, seed: int = 0, cfg: SpsaConfig = SpsaConfig(),
                         base_cost: Optional[float] = None, expand: int = 4) -> CriticalAttackResult:
    """Bisection on the attack size against the task deviation criterion.

    The deviation used for the decision is the running maximum over all
    sizes evaluated at or below the candidate, which makes the criterion
    monotone in ``eps``.
    """
    setting = env_setting(env, seed, count=batch)
    thr = task_threshold(env)
    if base_cost is None:
        from .controllers import make_base_controller
        base_cost = float(clean_rollout(setting, make_base_controller(env)).cost.mean())
    seen = {}

    def deviation(eps):
        if eps not in seen:
            res = synthesize_attack(setting, policy, eps, dataclasses.replace(cfg, seed=seed))
            seen[eps] = (res.mean_cost / base_cost, task_deviation(env, res.trajectory.states))
        return seen[eps]

    def envelope(eps):
        return max(d for e, (_, d) in seen.items() if e <= eps)

    def hit(eps):
        deviation(eps)
        return envelope(eps) > thr

    lo, hi = float(eps_range[0]), float(eps_range[1])
    if hit(lo):
        est, censored = lo, False
    else:
        est, censored, _ = bisect_threshold(hit, lo, hi, iterations=iterations, expand=expand)
    curve = [(e, seen[e][0], seen[e][1], envelope(e), envelope(e) > thr) for e in sorted(seen)]
    name = "mean position deviation > {:.3g} m" if env.name == "maglev" else \
        "mean pendulum angle > {:.3g} rad"
    return CriticalAttackResult(policy_id, float(est), censored, name.format(thr), thr, curve, [seed])


def sweep(env: Environment, policy, eps_list: Sequence[float], *, batch: int = 20, seed: int = 0,
          cfg: SpsaConfig = SpsaConfig(), base_cost: Optional[float] = None) -> list:
    """Attack at each size; rows ``(eps, mean_norm_cost, mean_deviation, hit)``."""
    setting = env_setting(env, seed, count=batch)
    thr = task_threshold(env)
    if base_cost is None:
        from .controllers import make_base_controller
        base_cost = float(clean_rollout(setting, make_base_controller(env)).cost.mean())
    rows = []
    for eps in eps_list:
        res = synthesize_attack(setting, policy, float(eps), dataclasses.replace(cfg, seed=seed))
        dev = task_deviation(env, res.trajectory.states)
        rows.append((float(eps), res.mean_cost / base_cost, dev, dev > thr))
    return rows


# ---------------------------------------------------------------------------
# Empirical gain of the attacked closed loop
# ---------------------------------------------------------------------------

@dataclass
class PolicyGain:
    bound: float
    probes: int
    skipped: int
    running_max: np.ndarray = field(repr=False)


def empirical_policy_gain(setting: AttackSetting, policy, *, probes: int = 50,
                          amplitude: float = 1.0, seed: int = 0, output: str = "performance",
                          pairs=None) -> PolicyGain:
    """Lower bound on the gain from measurement perturbations to ``z``.

    Each probe runs the first scenario of ``setting`` twice with attacks
    ``a1`` and ``a2`` (shared initial state and noise) and records
    ``|z1 - z2| / |a1 - a2|`` over the horizon; ``z`` is the performance
    variable stacked with the input (``output="performance"``) or the input
    alone (``output="input"``).
    """
    T, p = setting.horizon, setting.system.output_dim
    if pairs is None:
        rng = stream(seed, "gain-probes")
        a1 = amplitude * rng.uniform(-1, 1, size=(probes, T, p))
        a2 = amplitude * rng.uniform(-1, 1, size=(probes, T, p))
    else:
        a1, a2 = (np.asarray(a, dtype=float) for a in pairs)
    N = a1.shape[0]
    x0 = np.broadcast_to(setting.x0[0], (N, setting.x0.shape[-1])).copy()
    w = None if setting.w is None else setting.w[0]
    v = None if setting.v is None else setting.v[0]

    def z_of(a):
        tr = simulate(setting.system, policy, x0, T, process_noise=w, measurement_noise=v,
                      output_attack=a, cost=None)
        if output == "input":
            return tr.inputs
        perf = setting.cost.performance(tr.states[:, :T])
        return np.concatenate([perf, tr.inputs], axis=-1)

    z1, z2 = z_of(a1), z_of(a2)
    num = np.sqrt(np.sum((z1 - z2) ** 2, axis=(-1, -2)))
    den = np.sqrt(np.sum((a1 - a2) ** 2, axis=(-1, -2)))
    ok = den > 0
    ratio = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    running = np.maximum.accumulate(ratio) if ratio.size else np.zeros(0)
    return PolicyGain(float(running[-1]) if running.size else 0.0, int(ok.sum()),
                      int((~ok).sum()), running)
