"""Per-implementation reward history and the training-completion criterion.

An implementation counts as trained once the moving average of the totals its
actors earned across the last ten trials strictly exceeds the configured
threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

DEFAULT_WINDOW = 10
DEFAULT_THRESHOLD = 0.5


class MetricsError(Exception):
    """A recorded total was not a finite number."""


@dataclass
class RewardHistory:
    implementation: str
    window: int = DEFAULT_WINDOW
    threshold: float = DEFAULT_THRESHOLD
    totals: list[float] = field(default_factory=list)

    def record(self, total: float) -> None:
        if isinstance(total, bool) or not isinstance(total, (int, float)) or not math.isfinite(total):
            raise MetricsError(f"total must be finite, got {total!r}")
        self.totals.append(float(total))

    def moving_average(self) -> float | None:
        """Mean of the last ``window`` totals; undefined until the window fills."""
        if len(self.totals) < self.window:
            return None
        tail = self.totals[-self.window:]
        return math.fsum(tail) / self.window

    def is_trained(self, threshold: float | None = None) -> bool:
        ma = self.moving_average()
        if ma is None:
            return False
        return ma > (self.threshold if threshold is None else threshold)


class MetricsSink:
    """Single sink with serialized appends; reads take snapshots."""

    def __init__(self, window: int = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD) -> None:
        self.window = window
        self.threshold = threshold
        self._histories: dict[str, RewardHistory] = {}

    def record_trial_total(self, implementation: str, total: float) -> None:
        history = self._histories.get(implementation)
        if history is None:
            history = RewardHistory(implementation, window=self.window, threshold=self.threshold)
            self._histories[implementation] = history
        history.record(total)

    def history(self, implementation: str) -> RewardHistory | None:
        return self._histories.get(implementation)

    def is_trained(self, implementation: str, threshold: float | None = None) -> bool:
        history = self._histories.get(implementation)
        return bool(history) and history.is_trained(threshold)

    def render_table(self, threshold: float | None = None) -> str:
        """Plain-text table: one line per implementation with name, trial
        count, last total, ten-trial moving average, and trained flag."""
        lines = ["# implementation trials last_total ma10 trained"]
        for name in sorted(self._histories):
            history = self._histories[name]
            ma = history.moving_average()
            lines.append(" ".join([
                name,
                str(len(history.totals)),
                f"{history.totals[-1]:.6g}" if history.totals else "-",
                f"{ma:.6g}" if ma is not None else "-",
                "true" if history.is_trained(threshold) else "false",
            ]))
        return "\n".join(lines) + "\n"
