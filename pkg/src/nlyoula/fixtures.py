"""Analytic fixtures and independent oracles for the test-suite.

The stacked closed-loop oracle deliberately shares no stepping code with
the rollout engine: it has its own Runge-Kutta map, its own observer update
written in error coordinates and its own cell recursion on raw parameter
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import System


# ---------------------------------------------------------------------------
# Linear fixtures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearFixture:
    """``x+ = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    @property
    def stable(self) -> bool:
        return self.spectral_radius < 1.0

    @property
    def label(self) -> str:
        return "stable" if self.stable else "unstable"

    def step(self, x, u):
        return np.asarray(x) @ self.A.T + np.asarray(u) @ self.B.T

    def measure(self, x):
        return np.asarray(x) @ self.C.T

    def system(self, **kw) -> System:
        return System(self.A.shape[0], self.B.shape[1], self.C.shape[0], self.step, self.measure, **kw)

    def closed_form(self, x0: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """States ``x_0..x_T`` from the explicit convolution sum."""
        x0 = np.asarray(x0, float)
        T = inputs.shape[0]
        out = np.empty((T + 1, x0.size))
        for t in range(T + 1):
            acc = np.linalg.matrix_power(self.A, t) @ x0
            for k in range(t):
                acc = acc + np.linalg.matrix_power(self.A, t - 1 - k) @ self.B @ inputs[k]
            out[t] = acc
        return out

    def fixed_point(self, u: np.ndarray) -> np.ndarray:
        n = self.A.shape[0]
        return np.linalg.solve(np.eye(n) - self.A, self.B @ np.atleast_1d(u))


def scalar_fixture(a: float, b: float = 1.0, c: float = 1.0) -> LinearFixture:
    return LinearFixture([[a]], [[b]], [[c]])


def step_criterion(threshold: float):
    """Synthetic monotone criterion that triggers strictly above ``threshold``."""
    return lambda eps: eps > threshold


# ---------------------------------------------------------------------------
# Stacked closed-loop oracle
# ---------------------------------------------------------------------------

def _rk4(rhs, dt, x, u):
    a = rhs(x, u)
    b = rhs(x + 0.5 * dt * a, u)
    c = rhs(x + 0.5 * dt * b, u)
    d = rhs(x + dt * c, u)
    return x + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)


def _cell(p: dict, in_scale, out_scale, q, v):
    v = v / in_scale
    pre = np.einsum("hq,bq->bh", p["Cq"], q) + np.einsum("hu,bu->bh", p["Din"], v) + p["b"]
    h = np.where(pre > 0.0, pre, 0.0)
    out = out_scale * (np.einsum("oq,bq->bo", p["Co"], q) + np.einsum("ou,bu->bo", p["Dff"], v)
                       + p["bo"])
    qn = p["A"] * q + np.einsum("qh,bh->bq", p["B"], h) + np.einsum("qu,bu->bq", p["Bu"], v)
    return qn, out


def stacked_closed_loop_oracle(env, feedback, gain: np.ndarray, cell=None, params: Optional[dict] = None,
                               *, innovation_gain: Optional[np.ndarray] = None):
    """Return ``run(x0, xt0, q0, w, v, r, T) -> (x, xt, [xti], q, u)``.

    The recursion is on the stacked state ``(x, xt, q)`` with ``xt = x - xh``
    the observer error (and ``xti`` the innovation observer error when a
    separate innovation gain is given):

        xh   = x - xt
        yt   = y - c(x - xti)
        ut, q+ = cell(q, (r, yt))
        u    = k(xh) + ut
        x+   = F(x, u + r) + w
        xt+  = x+ - F(xh, u + r) - L (y - c(xh))
    """
    rhs, dt, c = env.rhs, env.dt, env.measure
    L = np.asarray(gain, float)
    Li = None if innovation_gain is None else np.asarray(innovation_gain, float)
    if cell is not None:
        si = np.ones(cell.input_dim) if cell.in_scale is None else np.asarray(cell.in_scale, float)
        so = np.ones(cell.output_dim) if cell.out_scale is None else np.asarray(cell.out_scale, float)

    def run(x0, xt0, q0, w, v, r, T, xti0=None):
        x, xt = np.array(x0, float), np.array(xt0, float)
        xti = None if Li is None else np.array(xt0 if xti0 is None else xti0, float)
        q = None if q0 is None else np.array(q0, float)
        X, XT, XTI, Q, U = [x], [xt], [xti], [q], []
        for t in range(T):
            y = c(x) + v[:, t]
            xh = x - xt
            u = feedback(xh)
            if cell is not None:
                src = xh if xti is None else x - xti
                inp = np.concatenate([r[:, t], y - c(src)], axis=-1)
                q, ut = _cell(params, si, so, q, inp)
                u = u + ut
            ubar = u + r[:, t]
            xn = _rk4(rhs, dt, x, ubar) + w[:, t]
            xhn = _rk4(rhs, dt, xh, ubar) + np.einsum("np,bp->bn", L, y - c(xh))
            if xti is not None:
                xhi = x - xti
                xhin = _rk4(rhs, dt, xhi, ubar) + np.einsum("np,bp->bn", Li, y - c(xhi))
                xti = xn - xhin
            x, xt = xn, xn - xhn
            X.append(x)
            XT.append(xt)
            XTI.append(xti)
            Q.append(q)
            U.append(u)
        out = {"x": np.stack(X, 1), "xt": np.stack(XT, 1), "u": np.stack(U, 1)}
        if q is not None:
            out["q"] = np.stack(Q, 1)
        if xti is not None:
            out["xti"] = np.stack(XTI, 1)
        return out

    return run
