"""
Network-evaluation tracking for samplers.
Counts how many times each field is called so NFE claims can be checked.
"""

from collections import Counter
from typing import Any, Dict, Optional


class EvaluationTracker:
    """Tracks field evaluations (calls and evaluated rows) per role."""

    def __init__(self):
        self.calls: Counter = Counter()
        self.rows: Counter = Counter()

    def track(self, role: str, batch_size: int) -> None:
        self.calls[role] += 1
        self.rows[role] += int(batch_size)

    def nfe(self, role: Optional[str] = None) -> int:
        """Calls per sample: every call evaluates each row of the batch once."""
        if role is not None:
            return self.calls[role]
        return sum(self.calls.values())

    def clear(self) -> None:
        self.calls.clear()
        self.rows.clear()

    def get_summary(self) -> Dict[str, Any]:
        return {
            "total_calls": sum(self.calls.values()),
            "calls": dict(self.calls),
            "rows": dict(self.rows),
        }
