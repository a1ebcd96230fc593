"""Sequence models used as the Youla parameter.

Every model is described by a flat vector of free (unconstrained) reals and
a :class:`ParamLayout`.  ``prepare`` maps free vectors to ready-to-step
parameters; for :class:`ContractingCell` this is where the certificate is
enforced, so any free vector gives a contracting, Lipschitz-bounded model.

Parameters may be stacked: ``prepare`` on a ``(P, size)`` array returns
parameters with a leading axis of length ``P`` and the model then steps
states of shape ``(P, B, dim)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ConfigurationError

POWER_TOL = 1e-8
POWER_MAX_ITER = 500


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamLayout:
    """Ordered named blocks of a flat float64 parameter vector."""

    entries: tuple  # ((name, shape), ...)

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(shape)) for _, shape in self.entries))

    def offsets(self) -> dict:
        out, pos = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = (pos, pos + n, tuple(shape))
            pos += n
        return out

    def unpack(self, vec: np.ndarray) -> dict:
        vec = np.asarray(vec, dtype=float)
        if vec.shape[-1] != self.size:
            raise ConfigurationError(f"parameter vector has length {vec.shape[-1]}, layout needs {self.size}")
        lead = vec.shape[:-1]
        return {name: vec[..., a:b].reshape(lead + shape).copy()
                for name, (a, b, shape) in self.offsets().items()}

    def pack(self, params: dict) -> np.ndarray:
        parts = []
        lead = None
        for name, shape in self.entries:
            arr = np.asarray(params[name], dtype=float)
            k = arr.ndim - len(shape)
            if arr.shape[k:] != tuple(shape):
                raise ConfigurationError(f"block {name!r} has shape {arr.shape}, expected {shape}")
            lead = arr.shape[:k] if lead is None else lead
            parts.append(arr.reshape(lead + (-1,)))
        return np.concatenate(parts, axis=-1)

    def to_json(self) -> list:
        return [[name, list(shape)] for name, shape in self.entries]

    @classmethod
    def from_json(cls, data) -> "ParamLayout":
        return cls(tuple((name, tuple(shape)) for name, shape in data))


def save_params(path_bin, path_json, vec: np.ndarray, layout: ParamLayout, meta: dict) -> None:
    """Write a checkpoint as little-endian float64 plus layout/metadata JSON."""
    vec = np.ascontiguousarray(vec, dtype="<f8")
    if vec.ndim != 1 or vec.size != layout.size:
        raise ConfigurationError("checkpoint vector does not match its layout")
    with open(path_bin, "wb") as fh:
        fh.write(vec.tobytes())
    doc = dict(meta)
    doc["layout"] = layout.to_json()
    doc["byte_order"] = "little"
    doc["dtype"] = "float64"
    with open(path_json, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_params(path_bin, path_json):
    with open(path_json) as fh:
        doc = json.load(fh)
    layout = ParamLayout.from_json(doc["layout"])
    vec = np.fromfile(path_bin, dtype="<f8").astype(float)
    if vec.size != layout.size:
        raise ConfigurationError(f"{path_bin}: {vec.size} values, layout needs {layout.size}")
    return vec, layout, doc


# ---------------------------------------------------------------------------
# Spectral norms
# ---------------------------------------------------------------------------

def _start_vector(n: int) -> np.ndarray:
    v = np.cos(1.3 * np.arange(n) + 0.7) + 0.05
    return v / np.linalg.norm(v)


def spectral_norm(M: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER):
    """Largest singular value of ``M`` by power iteration.

    Iterates on ``(M^T M)^8`` (normalized) from a fixed start vector and stops
    once the eigen-residual of ``M^T M`` is below ``tol`` relative.  Returns
    ``(value, converged)``; without convergence the Frobenius norm, an upper
    bound, is returned instead.
    """
    M = np.asarray(M, dtype=float)
    fro = float(np.sqrt(np.sum(M * M)))
    if M.size == 0 or fro == 0.0:
        return 0.0, True
    G = (M.T @ M) / (fro * fro)
    H = np.linalg.matrix_power(G, 8)
    v = _start_vector(G.shape[0])
    for _ in range(max_iter):
        w = G @ v
        lam = float(v @ w)
        if lam > 0 and np.linalg.norm(w - lam * v) <= tol * lam:
            return fro * float(np.sqrt(lam)), True
        v = H @ v
        nv = np.linalg.norm(v)
        if not nv > 0:
            break
        v = v / nv
    return fro, False


# ---------------------------------------------------------------------------
# Contracting cell
# ---------------------------------------------------------------------------

def _expand_vectors(params: dict, stacked: bool, vector_names) -> dict:
    # (P, d) -> (P, 1, d) so biases broadcast against (P, B, d) states
    if not stacked:
        return params
    out = dict(params)
    for name in vector_names:
        out[name] = params[name][:, None, :]
    return out


def _mat_apply(x: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``x @ M^T`` with ``M`` optionally stacked on a leading axis."""
    return np.matmul(x, np.swapaxes(M, -1, -2))


@dataclass(frozen=True)
class ContractingCell:
    """Recurrent cell with a certified contraction rate and Lipschitz bound.

    Update and output (``u`` is the input divided elementwise by ``in_scale``)::

        q+ = A q + B relu(Cq q + Din u + b) + Bu u
        out = out_scale * (Co q + Dff u + bo)

    ``A`` is diagonal.  The certificate uses the per-step factor
    ``s = |A| + |B| |Cq|`` and the gain bound
    ``|Dff| + |Co| (|Bu| + |B| |Din|) / (1 - alpha_bar)``, all spectral norms
    taken on the effective (scaled) matrices.
    """

    input_dim: int
    output_dim: int
    state_dim: int = 32
    hidden_dim: int = 64
    alpha_bar: float = 0.95
    gamma: float = float("inf")
    in_scale: Optional[tuple] = None
    out_scale: Optional[tuple] = None
    init_std: float = 0.1

    kind = "contracting"

    def __post_init__(self):
        if not 0.0 <= self.alpha_bar < 1.0:
            raise ConfigurationError(f"alpha_bar must lie in [0, 1), got {self.alpha_bar}")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive or inf, got {self.gamma}")
        for name in ("input_dim", "output_dim", "state_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name, dim in (("in_scale", self.input_dim), ("out_scale", self.output_dim)):
            val = getattr(self, name)
            if val is not None and (len(val) != dim or min(val) <= 0):
                raise ConfigurationError(f"{name} needs {dim} positive entries")

    @property
    def layout(self) -> ParamLayout:
        nq, nh, nu, ny = self.state_dim, self.hidden_dim, self.input_dim, self.output_dim
        return ParamLayout((("A", (nq,)), ("B", (nq, nh)), ("Bu", (nq, nu)), ("Cq", (nh, nq)),
                            ("Din", (nh, nu)), ("b", (nh,)), ("Co", (ny, nq)),
                            ("Dff", (ny, nu)), ("bo", (ny,))))

    @property
    def num_params(self) -> int:
        return self.layout.size

    def _scales(self):
        si = np.ones(self.input_dim) if self.in_scale is None else np.asarray(self.in_scale, float)
        so = np.ones(self.output_dim) if self.out_scale is None else np.asarray(self.out_scale, float)
        return si, so

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        p = self.layout.unpack(rng.normal(0.0, self.init_std, self.layout.size))
        p["Co"][:] = 0.0
        p["Dff"][:] = 0.0
        p["bo"][:] = 0.0
        return self.layout.pack(p)

    # -- certificate -------------------------------------------------------

    def norms(self, p: dict) -> dict:
        """Spectral norms of the effective matrices of one parameter set."""
        si, so = self._scales()
        out = {}
        conv = True
        for name, M in (("A", np.diag(p["A"])), ("B", p["B"]), ("Cq", p["Cq"]),
                        ("Bu", p["Bu"] / si), ("Din", p["Din"] / si),
                        ("Co", so[:, None] * p["Co"]), ("Dff", so[:, None] * p["Dff"] / si)):
            if name == "A":
                val, ok = float(np.max(np.abs(p["A"]))), True
            else:
                val, ok = spectral_norm(M)
            out[name] = val
            conv = conv and ok
        out["converged"] = conv
        return out

    def certificate(self, p: dict) -> dict:
        n = self.norms(p)
        s = n["A"] + n["B"] * n["Cq"]
        lu = n["Bu"] + n["B"] * n["Din"]
        gb = n["Dff"] + n["Co"] * lu / (1.0 - self.alpha_bar)
        return {"contraction": s, "gain_bound": gb, "input_gain": lu, "norms": n}

    def project(self, free: np.ndarray) -> dict:
        """Constrained parameters for a single free vector."""
        p = self.layout.unpack(free)
        n = self.norms(p)
        s = n["A"] + n["B"] * n["Cq"]
        eta = self.alpha_bar / max(s, self.alpha_bar) if s > 0 else 1.0
        if eta < 1.0:
            for name in ("A", "B", "Bu"):
                p[name] = eta * p[name]
        if np.isfinite(self.gamma):
            lu = eta * (n["Bu"] + n["B"] * n["Din"])
            gb = n["Dff"] + n["Co"] * lu / (1.0 - self.alpha_bar)
            theta = self.gamma / max(gb, self.gamma)
            if theta < 1.0:
                p["Co"] = theta * p["Co"]
                p["Dff"] = theta * p["Dff"]
        return p

    # -- stepping ----------------------------------------------------------

    def prepare(self, free: np.ndarray) -> dict:
        free = np.asarray(free, dtype=float)
        si, so = self._scales()
        if free.ndim == 1:
            p = self.project(free)
            stacked = False
        elif free.ndim == 2:
            ps = [self.project(f) for f in free]
            p = {k: np.stack([q[k] for q in ps]) for k in ps[0]}
            stacked = True
        else:
            raise ConfigurationError("free parameters must be 1-D or 2-D")
        p = _expand_vectors(p, stacked, ("A", "b", "bo"))
        p["inv_in"] = 1.0 / si
        p["out_scale"] = so
        p["stacked"] = stacked
        return p

    def initial_state(self, params: dict, batch_shape: tuple) -> np.ndarray:
        return np.zeros(tuple(batch_shape) + (self.state_dim,))

    def step(self, params: dict, q: np.ndarray, u: np.ndarray):
        u = u * params["inv_in"]
        h = np.maximum(_mat_apply(q, params["Cq"]) + _mat_apply(u, params["Din"]) + params["b"], 0.0)
        out = params["out_scale"] * (_mat_apply(q, params["Co"]) + _mat_apply(u, params["Dff"])
                                     + params["bo"])
        qn = params["A"] * q + _mat_apply(h, params["B"]) + _mat_apply(u, params["Bu"])
        return qn, out


# ---------------------------------------------------------------------------
# LSTM baseline
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class LstmCell:
    """Standard LSTM followed by a linear read-out; no stability certificate."""

    input_dim: int
    output_dim: int
    units: int = 28
    in_scale: Optional[tuple] = None
    out_scale: Optional[tuple] = None
    init_std: float = 0.1

    kind = "lstm"

    @property
    def layout(self) -> ParamLayout:
        h, ni, no = self.units, self.input_dim, self.output_dim
        return ParamLayout((("W", (4 * h, ni)), ("U", (4 * h, h)), ("b", (4 * h,)),
                            ("Wo", (no, h)), ("bo", (no,))))

    @property
    def state_dim(self) -> int:
        return 2 * self.units

    @property
    def num_params(self) -> int:
        return self.layout.size

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        p = self.layout.unpack(rng.normal(0.0, self.init_std, self.layout.size))
        p["Wo"][:] = 0.0
        p["bo"][:] = 0.0
        return self.layout.pack(p)

    def prepare(self, free: np.ndarray) -> dict:
        free = np.asarray(free, dtype=float)
        if free.ndim not in (1, 2):
            raise ConfigurationError("free parameters must be 1-D or 2-D")
        p = self.layout.unpack(free)
        p = _expand_vectors(p, free.ndim == 2, ("b", "bo"))
        si = np.ones(self.input_dim) if self.in_scale is None else np.asarray(self.in_scale, float)
        so = np.ones(self.output_dim) if self.out_scale is None else np.asarray(self.out_scale, float)
        p["inv_in"] = 1.0 / si
        p["out_scale"] = so
        p["stacked"] = free.ndim == 2
        return p

    def initial_state(self, params: dict, batch_shape: tuple) -> np.ndarray:
        return np.zeros(tuple(batch_shape) + (2 * self.units,))

    def step(self, params: dict, state: np.ndarray, u: np.ndarray):
        h, c = state[..., :self.units], state[..., self.units:]
        u = u * params["inv_in"]
        z = _mat_apply(u, params["W"]) + _mat_apply(h, params["U"]) + params["b"]
        n = self.units
        i, f = _sigmoid(z[..., :n]), _sigmoid(z[..., n:2 * n])
        g, o = np.tanh(z[..., 2 * n:3 * n]), _sigmoid(z[..., 3 * n:])
        c = f * c + i * g
        h_new = o * np.tanh(c)
        # read-out from the current hidden state keeps the map strictly causal in q
        out = params["out_scale"] * (_mat_apply(h, params["Wo"]) + params["bo"])
        return np.concatenate([h_new, c], axis=-1), out


# ---------------------------------------------------------------------------
# Empirical gain
# ---------------------------------------------------------------------------

@dataclass
class GainEstimate:
    bound: float
    probes: int
    skipped: int
    running_max: np.ndarray = field(repr=False)


def run_sequence(model, params: dict, inputs: np.ndarray, q0: Optional[np.ndarray] = None):
    """Outputs ``(..., T, ny)`` and final state for input sequences ``(..., T, nu)``."""
    inputs = np.asarray(inputs, dtype=float)
    batch = inputs.shape[:-2]
    q = model.initial_state(params, batch) if q0 is None else np.asarray(q0, dtype=float)
    outs = []
    for t in range(inputs.shape[-2]):
        q, o = model.step(params, q, inputs[..., t, :])
        outs.append(o)
    return np.stack(outs, axis=-2), q


def empirical_gain(model, params: dict, *, probes: int = 1000, horizon: int = 50,
                   seed: int = 0, amplitude: float = 1.0, pairs=None) -> GainEstimate:
    """Lower bound on the input-to-output Lipschitz constant.

    Both members of a pair start from the zero state; the ratio is
    ``|out1 - out2| / |in1 - in2|`` with norms over the whole horizon.
    ``pairs`` may supply explicit ``(in1, in2)`` arrays ``(N, T, nu)``.
    """
    if pairs is None:
        rng = np.random.default_rng(seed)
        u1 = amplitude * rng.standard_normal((probes, horizon, model.input_dim))
        scale = amplitude * 10.0 ** rng.uniform(-3, 0, size=(probes, 1, 1))
        u2 = u1 + scale * rng.standard_normal(u1.shape)
    else:
        u1, u2 = (np.asarray(a, dtype=float) for a in pairs)
    y1, _ = run_sequence(model, params, u1)
    y2, _ = run_sequence(model, params, u2)
    num = np.sqrt(np.sum((y1 - y2) ** 2, axis=(-1, -2)))
    den = np.sqrt(np.sum((u1 - u2) ** 2, axis=(-1, -2)))
    ok = den > 0
    ratio = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    running = np.maximum.accumulate(ratio) if ratio.size else np.zeros(0)
    return GainEstimate(float(running[-1]) if running.size else 0.0, int(ok.sum()),
                        int((~ok).sum()), running)


def make_qmodel(kind: str, input_dim: int, output_dim: int, **kw):
    if kind in ("contracting", "youla-contracting", "youla-gamma"):
        return ContractingCell(input_dim, output_dim, **kw)
    if kind in ("lstm", "feedback-lstm"):
        return LstmCell(input_dim, output_dim, **kw)
    raise ConfigurationError(f"unknown model class {kind!r}")
