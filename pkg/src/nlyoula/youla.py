"""Observer-based Youla augmentation of a base controller, and the
direct-feedback alternative.

``YoulaPolicy`` computes, at every step,

    innovation   = y - c(xh_i)
    ut, q+       = Q(q, (r, innovation))
    u            = k(xh) + ut
    xh+          = f(xh, u + r) + L (y - c(xh))

where ``xh`` is the control observer and ``xh_i`` the (optionally separate)
observer supplying the innovations.  With ``q_model=None`` the policy is the
base controller, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .controllers import BaseController, Observer, StateFeedback
from .dynamics import ConfigurationError


@dataclass(frozen=True)
class BoundModel:
    """A sequence model together with prepared parameters."""

    model: Any
    params: dict

    @property
    def input_dim(self) -> int:
        return self.model.input_dim

    @property
    def output_dim(self) -> int:
        return self.model.output_dim

    def initial_state(self, batch_shape: tuple):
        return self.model.initial_state(self.params, batch_shape)

    def step(self, state, inp):
        return self.model.step(self.params, state, inp)


def bind(model, free: np.ndarray) -> BoundModel:
    return BoundModel(model, model.prepare(free))


@dataclass(frozen=True)
class YoulaState:
    xh: np.ndarray
    xh_innov: Optional[np.ndarray]
    q: Any


@dataclass(frozen=True)
class YoulaPolicy:
    observer: Observer
    feedback: StateFeedback
    q_model: Optional[Any] = None          # BoundModel-like: initial_state(batch), step(q, v)
    innovation_observer: Optional[Observer] = None
    ref_dim: int = 1

    def __post_init__(self):
        if self.q_model is not None:
            need = self.ref_dim + self.input_dim
            if self.q_model.input_dim != need:
                raise ConfigurationError(
                    f"Youla parameter takes {self.q_model.input_dim} inputs, expected {need} "
                    f"(reference {self.ref_dim} + innovations {self.input_dim})")
            if self.q_model.output_dim != self.output_dim:
                raise ConfigurationError("Youla parameter output does not match the plant input")

    @property
    def input_dim(self) -> int:
        return self.observer.gain.shape[1]

    @property
    def output_dim(self) -> int:
        return self.ref_dim

    def initial_state(self, batch_shape: tuple) -> YoulaState:
        xh = self.observer.initial_state(batch_shape)
        xi = None if self.innovation_observer is None else self.innovation_observer.initial_state(batch_shape)
        q = None if self.q_model is None else self.q_model.initial_state(batch_shape)
        return YoulaState(xh, xi, q)

    def innovation(self, state: YoulaState, y: np.ndarray) -> np.ndarray:
        src = state.xh if state.xh_innov is None else state.xh_innov
        obs = self.observer if self.innovation_observer is None else self.innovation_observer
        return y - obs.measure(src)

    def step(self, state: YoulaState, y: np.ndarray, r: np.ndarray):
        u = self.feedback(state.xh)
        q = state.q
        if self.q_model is not None:
            v = np.concatenate([np.broadcast_to(r, y.shape[:-1] + r.shape[-1:]),
                                self.innovation(state, y)], axis=-1)
            q, ut = self.q_model.step(q, v)
            u = u + ut
        ubar = u + r
        xh = self.observer.predict(state.xh, ubar, y)
        xi = None
        if state.xh_innov is not None:
            xi = self.innovation_observer.predict(state.xh_innov, ubar, y)
        return u, YoulaState(xh, xi, q)


@dataclass(frozen=True)
class FeedbackState:
    xh: np.ndarray
    h: Any


@dataclass(frozen=True)
class FeedbackPolicy:
    """Base controller plus a sequence model fed directly by ``y - y_offset``."""

    base: BaseController
    net: Any
    y_offset: Optional[np.ndarray] = None

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    @property
    def output_dim(self) -> int:
        return self.base.output_dim

    def initial_state(self, batch_shape: tuple) -> FeedbackState:
        return FeedbackState(self.base.initial_state(batch_shape), self.net.initial_state(batch_shape))

    def step(self, state: FeedbackState, y: np.ndarray, r: np.ndarray):
        u = self.base.feedback(state.xh)
        yin = y if self.y_offset is None else y - self.y_offset
        h, ut = self.net.step(state.h, yin)
        u = u + ut
        xh = self.base.observer.predict(state.xh, u + r, y)
        return u, FeedbackState(xh, h)


@dataclass(frozen=True)
class LinearNet:
    """Static map ``v -> F v`` with an empty state (a memoryless 'sequence model')."""

    F: np.ndarray

    @property
    def input_dim(self) -> int:
        return np.asarray(self.F).shape[1]

    @property
    def output_dim(self) -> int:
        return np.asarray(self.F).shape[0]

    def initial_state(self, batch_shape: tuple):
        return np.zeros(tuple(batch_shape) + (0,))

    def step(self, state, v):
        return state, np.matmul(v, np.asarray(self.F, dtype=float).T)


# ---------------------------------------------------------------------------
# Converse construction: any output-feedback controller as a Youla parameter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QKState:
    phi: Any
    xh: np.ndarray


@dataclass(frozen=True)
class QK:
    """Youla parameter reproducing an arbitrary controller ``K``.

    Carries a private copy of the observer: it rebuilds ``y = innovation +
    c(xh)``, runs ``K`` on it and outputs ``K(y) - k(xh)``.  Inside the
    Youla loop the private estimate coincides with the controller's, so the
    applied input equals ``K``'s.
    """

    controller: Any
    observer: Observer
    feedback: StateFeedback
    ref_dim: int = 1

    @property
    def input_dim(self) -> int:
        return self.ref_dim + self.observer.gain.shape[1]

    @property
    def output_dim(self) -> int:
        return self.ref_dim

    def initial_state(self, batch_shape: tuple) -> QKState:
        return QKState(self.controller.initial_state(batch_shape),
                       self.observer.initial_state(batch_shape))

    def step(self, state: QKState, v: np.ndarray):
        r, innov = v[..., :self.ref_dim], v[..., self.ref_dim:]
        y = innov + self.observer.measure(state.xh)
        u_k, phi = self.controller.step(state.phi, y, r)
        ut = u_k - self.feedback(state.xh)
        xh = self.observer.predict(state.xh, u_k + r, y)
        return QKState(phi, xh), ut


def construct_QK(controller, observer: Observer, feedback: StateFeedback) -> QK:
    p = observer.gain.shape[1]
    if getattr(controller, "input_dim", p) != p:
        raise ConfigurationError(
            f"controller consumes {controller.input_dim} outputs, observer measures {p}")
    m = getattr(controller, "output_dim", 1)
    return QK(controller, observer, feedback, ref_dim=m)
