from typing import Any, Callable, Optional

import numpy as np

from src.logic.evaluation_tracker import EvaluationTracker


class TrackingField:
    """Field wrapper that reports every evaluation to an EvaluationTracker."""

    def __init__(self, field: Callable[..., np.ndarray], role: str, tracker: Optional[EvaluationTracker] = None):
        self.field = field
        self.role = role
        self.tracker = tracker if tracker is not None else EvaluationTracker()

    def __call__(self, x, *args: Any) -> np.ndarray:
        out = self.field(x, *args)
        self.tracker.track(self.role, np.atleast_2d(x).shape[0])
        return out

    def get_tracked_evaluations(self) -> int:
        return self.tracker.nfe(self.role)
