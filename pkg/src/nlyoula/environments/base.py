"""Common environment container and config loading."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..dynamics import ConfigurationError, NoiseSpec, System, discretize, stream
from .cost import CostSpec


@dataclass
class Environment:
    """A plant together with its noise model, cost and initial-state box.

    ``observer_chains[j]`` lists the states forming the integrator chain
    observed through output ``j`` (used for high-gain observer design).
    """

    name: str
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    measure: Callable[[np.ndarray], np.ndarray]
    state_dim: int
    input_dim: int
    output_dim: int
    dt: float
    horizon: int
    noise: NoiseSpec
    cost: CostSpec
    equilibrium_state: np.ndarray
    equilibrium_input: np.ndarray
    nominal_estimate: np.ndarray
    sample_initial: Callable[[np.random.Generator, int], np.ndarray]
    observer_chains: list
    config: dict = field(default_factory=dict)
    reference_bound: float = 1.0
    input_limits: Optional[tuple] = None
    angle_states: tuple = ()
    state_bound: float = 1e6

    def __post_init__(self):
        u_fn = self._clipped_rhs() if self.input_limits is not None else self.rhs
        self.system: System = discretize(
            u_fn, self.dt, state_dim=self.state_dim, input_dim=self.input_dim,
            measure=self.measure, output_dim=self.output_dim, name=self.name,
            state_bound=self.state_bound)

    def _clipped_rhs(self):
        lo, hi = self.input_limits
        rhs = self.rhs

        def clipped(x, u):
            return rhs(x, np.clip(u, lo, hi))
        return clipped

    def initial_conditions(self, seed: int, *keys, count: int) -> np.ndarray:
        """Initial states ``(count, n)``; state ``i`` comes from its own stream."""
        return np.stack([self.sample_initial(stream(seed, *keys, i, "x0"), 1)[0]
                         for i in range(count)])

    def noise_batch(self, seed: int, *keys, count: int, horizon: Optional[int] = None):
        """Process/measurement noise ``(count, T, n)``, ``(count, T, p)``."""
        T = self.horizon if horizon is None else horizon
        ws, vs = [], []
        for i in range(count):
            w, v = self.noise.with_stream(seed, *keys, i).sample(T)
            ws.append(w)
            vs.append(v)
        return np.stack(ws), np.stack(vs)

    def noise_spec(self, seed: int, *keys) -> NoiseSpec:
        return self.noise.with_stream(seed, *keys)

    def state_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Euclidean distance with angle differences wrapped to (-pi, pi]."""
        d = a - b
        if self.angle_states:
            d = d.copy()
            idx = list(self.angle_states)
            d[..., idx] = np.angle(np.exp(1j * d[..., idx]))
        return np.sqrt(np.sum(d * d, axis=-1))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _num_or_list(minimum=None):
    num = {"type": "number"}
    if minimum is not None:
        num["minimum"] = minimum
    return {"oneOf": [num, {"type": "array", "items": num, "minItems": 1}]}


ENV_SCHEMA = {
    "type": "object",
    "required": ["name", "dt", "horizon", "physical", "noise", "cost", "initial_conditions",
                 "observer", "feedback"],
    "properties": {
        "name": {"type": "string", "enum": ["maglev", "pendulum"]},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "physical": {"type": "object", "additionalProperties": {"type": "number"}},
        "noise": {
            "type": "object",
            "required": ["process_std", "measurement_std"],
            "properties": {"process_std": _num_or_list(0), "measurement_std": _num_or_list(0)},
        },
        "cost": {
            "type": "object",
            "required": ["Q", "R"],
            "properties": {"Q": {"type": "array", "items": {"type": "number"}},
                           "R": {"type": "array", "items": {"type": "number"}}},
        },
        "initial_conditions": {"type": "object",
                               "additionalProperties": {"type": "number", "minimum": 0}},
        "observer": {
            "type": "object",
            "required": ["eps", "gains"],
            "properties": {"eps": {"type": "number", "exclusiveMinimum": 0},
                           "gains": {"type": "array",
                                     "items": {"type": "array", "items": {"type": "number"}}},
                           "innovation_slow_factor": {"type": "number", "minimum": 1}},
        },
        "feedback": {"type": "object"},
        "reference": {"type": "object",
                      "properties": {"bound": {"type": "number", "minimum": 0}}},
        "input": {"type": "object",
                  "properties": {"clip": {"type": "boolean"},
                                 "low": {"type": "number"}, "high": {"type": "number"}}},
    },
}


def _merge(base: dict, overrides: Optional[dict]) -> dict:
    out = copy.deepcopy(base)
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def read_env_config(name_or_path: str, overrides: Optional[dict] = None) -> dict:
    path = Path(name_or_path)
    if path.suffix == ".toml" and path.exists():
        text = path.read_text()
    else:
        try:
            text = resources.files("nlyoula.environments").joinpath(
                "data", f"{name_or_path}.toml").read_text()
        except FileNotFoundError as exc:
            raise ConfigurationError(f"unknown environment {name_or_path!r}") from exc
    cfg = _merge(tomllib.loads(text), overrides)
    try:
        jsonschema.validate(cfg, ENV_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"environment config invalid at {where}: {exc.message}") from exc
    return cfg


def config_digest(cfg: dict) -> str:
    import hashlib
    blob = json.dumps(cfg, sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _per_channel(value, dim: int, what: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(dim, float(arr[0]))
    if arr.size != dim:
        raise ConfigurationError(f"{what} needs {dim} entries, got {arr.size}")
    return arr
