"""Policy classes for the two tasks and the training objective built on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controllers import BaseController, detuned_observer, make_base_controller
from .dynamics import ConfigurationError, simulate, stream
from .environments import Environment
from .qmodels import ContractingCell, LstmCell
from .youla import FeedbackPolicy, YoulaPolicy, bind

POLICY_CLASSES = ("youla-contracting", "youla-gamma", "feedback-lstm", "base-only")
EVAL_SEED = 7919


def _scales(env: Environment, key: str, dim: int):
    val = env.config.get("policy", {}).get(key)
    if val is None:
        return None
    val = tuple(float(v) for v in val)
    if len(val) != dim:
        raise ConfigurationError(f"policy.{key} needs {dim} entries, got {len(val)}")
    return val


def build_model(env: Environment, policy_class: str, *, gamma: float = float("inf"),
                alpha_bar: float = 0.95, state_dim: int = 32, hidden_dim: int = 64,
                lstm_units: int = 28):
    m, p = env.input_dim, env.output_dim
    if policy_class == "base-only":
        return None
    if policy_class in ("youla-contracting", "youla-gamma"):
        if policy_class == "youla-contracting":
            gamma = float("inf")
        elif not np.isfinite(gamma):
            raise ConfigurationError("youla-gamma needs a finite gamma")
        ref = _scales(env, "reference_scale", m)
        inn = _scales(env, "innovation_scale", p)
        in_scale = None if ref is None and inn is None else (ref or (1.0,) * m) + (inn or (1.0,) * p)
        return ContractingCell(m + p, m, state_dim=state_dim, hidden_dim=hidden_dim,
                               alpha_bar=alpha_bar, gamma=gamma, in_scale=in_scale,
                               out_scale=_scales(env, "output_scale", m))
    if policy_class == "feedback-lstm":
        return LstmCell(p, m, units=lstm_units, in_scale=_scales(env, "measurement_scale", p),
                        out_scale=_scales(env, "output_scale", m))
    raise ConfigurationError(f"unknown policy class {policy_class!r}; expected one of {POLICY_CLASSES}")


def innovation_observer(env: Environment):
    factor = env.config.get("observer", {}).get("innovation_slow_factor", 1.0)
    return None if factor == 1.0 else detuned_observer(env, factor)


@dataclass
class PolicyFactory:
    """Builds closed-loop policies for one environment and policy class."""

    env: Environment
    policy_class: str
    model: object = None
    base: BaseController = None
    innov: object = None

    def __post_init__(self):
        if self.base is None:
            self.base = make_base_controller(self.env)
        if self.policy_class.startswith("youla") and self.innov is None:
            self.innov = innovation_observer(self.env)
        if self.policy_class != "base-only" and self.model is None:
            raise ConfigurationError(f"policy class {self.policy_class!r} needs a model")

    @property
    def dim(self) -> int:
        return 0 if self.model is None else self.model.num_params

    def y_offset(self) -> np.ndarray:
        return self.env.measure(self.env.equilibrium_state)

    def __call__(self, theta: Optional[np.ndarray] = None):
        if self.policy_class == "base-only":
            return self.base
        bound = bind(self.model, theta)
        if self.policy_class == "feedback-lstm":
            return FeedbackPolicy(self.base, bound, self.y_offset())
        return YoulaPolicy(self.base.observer, self.base.feedback, bound, self.innov,
                           ref_dim=self.env.input_dim)


@dataclass
class Scenario:
    x0: np.ndarray
    w: np.ndarray
    v: np.ndarray


def scenario(env: Environment, seed: int, *keys, count: int) -> Scenario:
    x0 = env.initial_conditions(seed, *keys, count=count)
    w, v = env.noise_batch(seed, *keys, count=count)
    return Scenario(x0, w, v)


def evaluate(env: Environment, policy, sc: Scenario, *, stacked: int = 0, **kw):
    """Simulate ``policy`` on a scenario batch; with ``stacked=P`` the policy
    carries P parameter sets and the batch is replicated for each."""
    x0 = sc.x0
    if stacked:
        x0 = np.broadcast_to(x0, (stacked,) + x0.shape).copy()
    return simulate(env.system, policy, x0, env.horizon, process_noise=sc.w,
                    measurement_noise=sc.v, cost=env.cost, **kw)


@dataclass
class PolicyTask:
    """ARS objective: mean closed-loop cost of a parameterized policy."""

    factory: PolicyFactory
    train_batch: int = 50
    test_batch: int = 100
    eval_seed: int = EVAL_SEED
    _test: Scenario = field(default=None, repr=False)
    _base_cost: float = field(default=None, repr=False)

    @property
    def env(self) -> Environment:
        return self.factory.env

    @property
    def dim(self) -> int:
        return self.factory.dim

    def test_scenario(self) -> Scenario:
        if self._test is None:
            self._test = scenario(self.env, self.eval_seed, "test", count=self.test_batch)
        return self._test

    def initial_params(self, seed: int) -> np.ndarray:
        if self.factory.model is None:
            return np.zeros(0)
        return self.factory.model.init_params(stream(seed, "init"))

    def train_scenario(self, seed: int, epoch: int) -> Scenario:
        return scenario(self.env, seed, "train", epoch, count=self.train_batch)

    def train_costs(self, thetas: np.ndarray, seed: int, epoch: int) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        traj = evaluate(self.env, self.factory(thetas), self.train_scenario(seed, epoch),
                        stacked=thetas.shape[0])
        return traj.cost.mean(axis=-1)

    def test_cost(self, theta: np.ndarray) -> float:
        traj = evaluate(self.env, self.factory(theta), self.test_scenario())
        return float(traj.cost.mean())

    def base_test_cost(self) -> float:
        if self._base_cost is None:
            traj = evaluate(self.env, self.factory.base, self.test_scenario())
            self._base_cost = float(traj.cost.mean())
        return self._base_cost
