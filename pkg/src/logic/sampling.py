"""
Discrete samplers for rectified flow and CAF, CAF inversion and round-trip
reconstruction.

Fields are callables: velocity(x, t) and acceleration(x, t, v). Trained
MlpModels are wrapped automatically; oracle fields (flowcore.ExactFields)
plug in directly. Grid times are i/N and CAF midpoints (2i+1)/(2N).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.logic.errors import SamplingError
from src.logic.evaluation_tracker import EvaluationTracker
from src.logic.model_factory import AccelerationNet, VelocityNet
from src.logic.nnsub import MlpModel
from src.logic.tracking_field import TrackingField

logger = logging.getLogger(__name__)

Field = Callable[..., np.ndarray]


@dataclass(eq=False)
class TrajectoryLog:
    """Ordered (t, x_t) samples of one simulated path."""

    times: np.ndarray
    points: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] != self.times.shape[0]:
            raise ValueError(f"points {self.points.shape} must be (len(times)={len(self.times)}, d)")
        steps = np.diff(self.times)
        if self.meta.get("direction", "forward") == "inverse":
            ok = np.all(steps < 0.0)
        else:
            ok = np.all(steps > 0.0)
        if not ok:
            raise ValueError("trajectory times must be strictly monotone in the log direction")


@dataclass(eq=False)
class TrajectoryBatch:
    """Trajectories of a batch of paths simulated together; points is (T, B, d)."""

    times: np.ndarray
    points: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.points.shape[1]

    def path(self, i: int) -> TrajectoryLog:
        return TrajectoryLog(self.times.copy(), self.points[:, i, :].copy(), dict(self.meta, path=i))

    def logs(self) -> List[TrajectoryLog]:
        return [self.path(i) for i in range(len(self))]


def _velocity_field(v) -> Field:
    return VelocityNet(v) if isinstance(v, MlpModel) else v


def _acceleration_field(a, ivc: bool) -> Field:
    return AccelerationNet(a, ivc) if isinstance(a, MlpModel) else a


def _check_finite(x: np.ndarray, step_index: int, sampler: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.sum(~np.all(np.isfinite(x), axis=1)))
        raise SamplingError(f"{sampler}: non-finite state in {bad} path(s) at step {step_index}", step_index)


def _batch(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _check_steps(n_steps: int) -> None:
    if n_steps < 1:
        raise ValueError(f"N must be >= 1, got {n_steps}")


def integrate_rf(x0, v_field: Field, n_steps: int) -> np.ndarray:
    """Plain Euler integration without finiteness checks; reflow filters the result."""
    _check_steps(n_steps)
    v_field = _velocity_field(v_field)
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        x = x + dt * v_field(x, i / n_steps)
    return x


def sample_rf(x0, v_model, n_steps: int, tracker: Optional[EvaluationTracker] = None) -> Tuple[np.ndarray, TrajectoryBatch]:
    """Euler sampling x_{t+dt} = x_t + dt v(x_t, t) for t = i/N."""
    _check_steps(n_steps)
    x, squeeze = _batch(x0)
    tracker = tracker if tracker is not None else EvaluationTracker()
    v_field = TrackingField(_velocity_field(v_model), "velocity", tracker)
    dt = 1.0 / n_steps
    points = [x]
    for i in range(n_steps):
        x = x + dt * v_field(x, i / n_steps)
        _check_finite(x, i, "sample_rf")
        points.append(x)
    log = TrajectoryBatch(
        np.arange(n_steps + 1) / n_steps,
        np.stack(points),
        {"sampler": "rf", "n_steps": n_steps, "direction": "forward", "nfe": tracker.nfe(), "evaluations": tracker.get_summary()["calls"]},
    )
    return (x[0] if squeeze else x), log


def sample_caf(
    x0,
    v_model,
    a_model,
    n_steps: int,
    ivc: bool = True,
    initial_velocity: Optional[np.ndarray] = None,
    tracker: Optional[EvaluationTracker] = None,
) -> Tuple[np.ndarray, TrajectoryBatch]:
    """
    CAF sampling x_{t+dt} = x_t + dt v0 + t' dt a(x_t, t, v0).

    v0 = v(x0, 0) is evaluated once (skipped when initial_velocity is given)
    and reused at every step, so one sample costs N + 1 evaluations.
    """
    _check_steps(n_steps)
    x, squeeze = _batch(x0)
    tracker = tracker if tracker is not None else EvaluationTracker()
    a_field = TrackingField(_acceleration_field(a_model, ivc), "acceleration", tracker)
    if initial_velocity is None:
        v_field = TrackingField(_velocity_field(v_model), "velocity", tracker)
        v0 = v_field(x, 0.0)
    else:
        v0, _ = _batch(initial_velocity)
    dt = 1.0 / n_steps
    points = [x]
    for i in range(n_steps):
        t_prime = (2 * i + 1) / (2 * n_steps)
        a = a_field(x, i / n_steps, v0 if ivc else None)
        x = x + dt * v0 + t_prime * dt * a
        _check_finite(x, i, "sample_caf")
        points.append(x)
    log = TrajectoryBatch(
        np.arange(n_steps + 1) / n_steps,
        np.stack(points),
        {"sampler": "caf", "n_steps": n_steps, "direction": "forward", "ivc": ivc, "nfe": tracker.nfe(), "evaluations": tracker.get_summary()["calls"]},
    )
    return (x[0] if squeeze else x), log


def invert_caf(
    x1,
    v_model,
    a_model,
    n_steps: int,
    ivc: bool = True,
    tracker: Optional[EvaluationTracker] = None,
) -> Tuple[np.ndarray, np.ndarray, TrajectoryBatch]:
    """
    Run the CAF update backwards from x1.

    v_hat = v(x1, 1) is estimated once; for i = N-1 .. 0 the state steps back
    with the same midpoint t'_i, evaluating the acceleration at (x_{t+dt}, t+dt).

    Returns:
        (x0_hat, v_hat, trajectory) where v_hat is reused by reconstruct.
    """
    _check_steps(n_steps)
    x, squeeze = _batch(x1)
    tracker = tracker if tracker is not None else EvaluationTracker()
    v_field = TrackingField(_velocity_field(v_model), "velocity", tracker)
    a_field = TrackingField(_acceleration_field(a_model, ivc), "acceleration", tracker)
    v_hat = v_field(x, 1.0)
    dt = 1.0 / n_steps
    points = [x]
    for i in range(n_steps - 1, -1, -1):
        t_prime = (2 * i + 1) / (2 * n_steps)
        a = a_field(x, (i + 1) / n_steps, v_hat if ivc else None)
        x = x - dt * v_hat - t_prime * dt * a
        _check_finite(x, i, "invert_caf")
        points.append(x)
    log = TrajectoryBatch(
        np.arange(n_steps, -1, -1) / n_steps,
        np.stack(points),
        {"sampler": "caf", "n_steps": n_steps, "direction": "inverse", "ivc": ivc, "nfe": tracker.nfe(), "evaluations": tracker.get_summary()["calls"]},
    )
    if squeeze:
        return x[0], v_hat[0], log
    return x, v_hat, log


def reconstruct(x1, v_model, a_model, n_steps: int, ivc: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Invert x1, then regenerate from x0_hat with the same v_hat.

    Returns:
        (x1_hat, per-point round-trip error ||x1_hat - x1||)
    """
    x0_hat, v_hat, _ = invert_caf(x1, v_model, a_model, n_steps, ivc)
    x1_hat, _ = sample_caf(x0_hat, v_model, a_model, n_steps, ivc, initial_velocity=v_hat)
    err = np.linalg.norm(np.atleast_2d(x1_hat - np.asarray(x1, dtype=np.float64)), axis=1)
    return x1_hat, err


def invert_rf(x1, v_model, n_steps: int, tracker: Optional[EvaluationTracker] = None) -> Tuple[np.ndarray, TrajectoryBatch]:
    """Reverse Euler: x_t = x_{t+dt} - dt v(x_{t+dt}, t+dt)."""
    _check_steps(n_steps)
    x, squeeze = _batch(x1)
    tracker = tracker if tracker is not None else EvaluationTracker()
    v_field = TrackingField(_velocity_field(v_model), "velocity", tracker)
    dt = 1.0 / n_steps
    points = [x]
    for i in range(n_steps - 1, -1, -1):
        x = x - dt * v_field(x, (i + 1) / n_steps)
        _check_finite(x, i, "invert_rf")
        points.append(x)
    log = TrajectoryBatch(
        np.arange(n_steps, -1, -1) / n_steps,
        np.stack(points),
        {"sampler": "rf", "n_steps": n_steps, "direction": "inverse", "nfe": tracker.nfe(), "evaluations": tracker.get_summary()["calls"]},
    )
    return (x[0] if squeeze else x), log


def reconstruct_rf(x1, v_model, n_steps: int) -> Tuple[np.ndarray, np.ndarray]:
    x0_hat, _ = invert_rf(x1, v_model, n_steps)
    x1_hat, _ = sample_rf(x0_hat, v_model, n_steps)
    err = np.linalg.norm(np.atleast_2d(x1_hat - np.asarray(x1, dtype=np.float64)), axis=1)
    return x1_hat, err


def export_trajectories_csv(batch: Union[TrajectoryBatch, Sequence[TrajectoryLog]], path: Union[str, Path]) -> Path:
    """Long-format CSV: path, t, x_0 .. x_{d-1}."""
    logs = batch.logs() if isinstance(batch, TrajectoryBatch) else list(batch)
    frames = []
    for i, log in enumerate(logs):
        frame = pd.DataFrame(log.points, columns=[f"x_{k}" for k in range(log.points.shape[1])])
        frame.insert(0, "t", log.times)
        frame.insert(0, "path", i)
        frames.append(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
    return path


@dataclass(eq=False)
class FlowBundle:
    """
    A ready-to-run flow: an RF velocity field, or a CAF velocity/acceleration pair.

    Fields may be MlpModels or oracle callables. Metrics and the pipeline go
    through this so RF and CAF are interchangeable.
    """

    kind: str
    velocity: Any
    acceleration: Any = None
    ivc: bool = True
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("rf", "caf"):
            raise ValueError(f"Unsupported flow kind: {self.kind}")
        if self.kind == "caf" and self.acceleration is None:
            raise ValueError("a CAF bundle needs an acceleration field")

    def sample(self, x0, n_steps: int, tracker: Optional[EvaluationTracker] = None) -> Tuple[np.ndarray, TrajectoryBatch]:
        if self.kind == "rf":
            return sample_rf(x0, self.velocity, n_steps, tracker)
        return sample_caf(x0, self.velocity, self.acceleration, n_steps, self.ivc, tracker=tracker)

    def endpoint(self, x0, n_steps: int) -> np.ndarray:
        return self.sample(x0, n_steps)[0]

    def reconstruct(self, x1, n_steps: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == "rf":
            return reconstruct_rf(x1, self.velocity, n_steps)
        return reconstruct(x1, self.velocity, self.acceleration, n_steps, self.ivc)

    def invert(self, x1, n_steps: int) -> Tuple[np.ndarray, TrajectoryBatch]:
        if self.kind == "rf":
            return invert_rf(x1, self.velocity, n_steps)
        x0_hat, _, log = invert_caf(x1, self.velocity, self.acceleration, n_steps, self.ivc)
        return x0_hat, log

    def initial_velocity(self, x0) -> np.ndarray:
        return _velocity_field(self.velocity)(np.atleast_2d(x0), 0.0)

    def regressed(self, x_t, t: float, v0: Optional[np.ndarray] = None) -> np.ndarray:
        """The trained quantity at (x_t, t): RF velocity, or CAF acceleration conditioned on v0."""
        x_t = np.atleast_2d(x_t)
        if self.kind == "rf":
            return _velocity_field(self.velocity)(x_t, t)
        return _acceleration_field(self.acceleration, self.ivc)(x_t, t, v0 if self.ivc else None)

    def rate(self, x_t, t: float, v0: Optional[np.ndarray] = None) -> np.ndarray:
        """Instantaneous velocity: v(x_t, t) for RF, v0 + a(x_t, t, v0) t for CAF."""
        if self.kind == "rf":
            return self.regressed(x_t, t)
        if v0 is None:
            raise ValueError("CAF rate needs the initial velocity v0")
        return v0 + self.regressed(x_t, t, v0) * t


def load_trajectories_csv(path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> List[TrajectoryLog]:
    """Read a long-format trajectory CSV back into one log per path id."""
    frame = pd.read_csv(path)
    coords = [c for c in frame.columns if c.startswith("x_")]
    logs = []
    for path_id, rows in frame.groupby("path", sort=True):
        times = rows["t"].to_numpy()
        direction = "inverse" if times.shape[0] > 1 and times[1] < times[0] else "forward"
        logs.append(TrajectoryLog(times, rows[coords].to_numpy(), dict(meta or {}, path=int(path_id), direction=direction)))
    return logs
