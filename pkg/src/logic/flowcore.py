"""
Closed-form math of rectified flow and constant-acceleration flow.

All functions accept single vectors of shape (d,) or batches of shape (B, d);
t may be a scalar or a (B,) array.
"""

import math
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.config import FLOW_DEFAULTS
from src.logic.errors import ShapeError


class FlowConfig(BaseModel):
    """Flow hyperparameters: h, step count N, p(t) and the distance d."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    h: float = FLOW_DEFAULTS["h"]
    n_steps: int = Field(FLOW_DEFAULTS["n_steps"], ge=1)
    time_dist: Literal["uniform"] = FLOW_DEFAULTS["time_dist"]
    distance: Literal["l2_squared"] = FLOW_DEFAULTS["distance"]

    @field_validator("h")
    @classmethod
    def _finite_h(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("h must be finite")
        return value

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    def grid_time(self, i: int) -> float:
        # i/N rather than accumulated dt, so grid identities hold exactly
        return i / self.n_steps

    def midpoint(self, i: int) -> float:
        return (2 * i + 1) / (2 * self.n_steps)


def _pair(x0, x1) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x0, dtype=np.float64)
    b = np.asarray(x1, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: x0 {a.shape} vs x1 {b.shape}")
    return a, b


def _time(t, like: np.ndarray) -> np.ndarray:
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if tt.ndim == 1 and like.ndim == 2:
        if tt.shape[0] != like.shape[0]:
            raise ShapeError(f"t batch {tt.shape} does not match x batch {like.shape}")
        tt = tt[:, None]
    return tt


def interp_rf(x0, x1, t):
    """Linear interpolant (1 - t) x0 + t x1."""
    a, b = _pair(x0, x1)
    tt = _time(t, a)
    return (1.0 - tt) * a + tt * b


def velocity_target(x0, x1, h: float):
    """Initial-velocity target h (x1 - x0)."""
    a, b = _pair(x0, x1)
    return h * (b - a)


def acceleration_target(x0, x1, v):
    """Constant acceleration 2 (x1 - x0) - 2 v that lands on x1 at t = 1."""
    a, b = _pair(x0, x1)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != a.shape:
        raise ShapeError(f"dimension mismatch: v {v.shape} vs x0 {a.shape}")
    return 2.0 * (b - a) - 2.0 * v


def interp_caf(x0, x1, t, v):
    """Constant-acceleration interpolant (1 - t^2) x0 + t^2 x1 + v (t - t^2)."""
    a, b = _pair(x0, x1)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != a.shape:
        raise ShapeError(f"dimension mismatch: v {v.shape} vs x0 {a.shape}")
    tt = _time(t, a)
    return (1.0 - tt**2) * a + tt**2 * b + v * (tt - tt**2)


def caf_time_derivative(x0, x1, t, v):
    """d/dt of interp_caf: v + a t."""
    tt = _time(t, np.asarray(x0, dtype=np.float64))
    return np.asarray(v, dtype=np.float64) + acceleration_target(x0, x1, v) * tt


def interp_time(fraction: float, h: float) -> float:
    """Earliest t in [0, 1] at which the CAF interpolant has covered fraction of x1 - x0.

    Solves h t + (1 - h) t^2 = fraction; h = 1 gives t = fraction.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if math.isclose(h, 1.0):
        return float(fraction)
    roots = np.roots([1.0 - h, h, -fraction])
    real = sorted(float(r.real) for r in roots if abs(r.imag) < 1e-12 and -1e-12 <= r.real <= 1.0 + 1e-12)
    if not real:
        raise ValueError(f"the interpolant with h={h} never covers fraction {fraction}")
    return min(max(real[0], 0.0), 1.0)


def closed_form_endpoint(x0, v, a):
    """One-step CAF solution x0 + v + a / 2."""
    x0 = np.asarray(x0, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if not (x0.shape == v.shape == a.shape):
        raise ShapeError(f"dimension mismatch: x0 {x0.shape}, v {v.shape}, a {a.shape}")
    return x0 + v + 0.5 * a


def exact_field_oracle(x0, x1, t, h: float):
    """Ground-truth (v, a, x_t) for a known pair at time t."""
    v = velocity_target(x0, x1, h)
    a = acceleration_target(x0, x1, v)
    return v, a, interp_caf(x0, x1, t, v)


class ExactFields:
    """
    Oracle fields for a fixed batch of pairs.

    Calls have the same signature as the trained-network fields
    (velocity(x, t), acceleration(x, t, v)); row i of every input belongs to
    pair i, and the state argument is ignored because the pair is known.
    """

    def __init__(self, x0, x1, h: float):
        self.x0, self.x1 = _pair(np.atleast_2d(x0), np.atleast_2d(x1))
        self.h = float(h)
        self.v = velocity_target(self.x0, self.x1, self.h)

    def _rows(self, x) -> slice:
        n = np.atleast_2d(x).shape[0]
        if n != self.x0.shape[0]:
            raise ShapeError(f"oracle holds {self.x0.shape[0]} pairs, got a batch of {n}")
        return slice(0, n)

    def velocity(self, x, t) -> np.ndarray:
        return self.v[self._rows(x)].copy()

    def acceleration(self, x, t, v: Optional[np.ndarray] = None) -> np.ndarray:
        rows = self._rows(x)
        cond = self.v[rows] if v is None else np.asarray(v, dtype=np.float64)
        return acceleration_target(self.x0[rows], self.x1[rows], cond)

    def rf_velocity(self, x, t) -> np.ndarray:
        return (self.x1 - self.x0)[self._rows(x)].copy()
