"""Multi-source reward aggregation and the per-trial reward ledger."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .protocol import ParticipantId, ProtocolError, Reward


@dataclass(frozen=True, slots=True)
class AggregatedReward:
    """Confidence-weighted mean of every reward targeting one (actor, tick)."""

    actor: str
    target_tick: int
    value: float
    total_confidence: float
    sources: tuple[ParticipantId, ...]

    def to_payload(self) -> dict[str, Any]:
        return {
            "actor": self.actor,
            "target_tick": self.target_tick,
            "value": self.value,
            "total_confidence": self.total_confidence,
            "sources": [s.to_payload() for s in self.sources],
        }

    @classmethod
    def from_payload(cls, obj: dict[str, Any]) -> "AggregatedReward":
        return cls(
            actor=obj["actor"],
            target_tick=obj["target_tick"],
            value=obj["value"],
            total_confidence=obj["total_confidence"],
            sources=tuple(ParticipantId.from_payload(s) for s in obj["sources"]),
        )


def aggregate(actor: str, target_tick: int, rewards: Sequence[Reward]) -> AggregatedReward:
    """Weighted mean sum(v*c)/sum(c) over the contributors.

    Both sums are exact-then-rounded (math.fsum), so the value is invariant
    under permutation of contributors and under splitting one contribution's
    confidence in half.
    """
    if not rewards:
        raise ValueError("aggregate() requires at least one contributing reward")
    weighted = math.fsum(r.value * r.confidence for r in rewards)
    total = math.fsum(r.confidence for r in rewards)
    return AggregatedReward(
        actor=actor,
        target_tick=target_tick,
        value=weighted / total,
        total_confidence=total,
        sources=tuple(r.source for r in rewards),
    )


class RetroWindowExceeded(Exception):
    """The reward reaches further back than the trial's retro window allows."""


class RewardLedger:
    """Raw rewards grouped by (actor, target_tick), in receive order."""

    def __init__(self, retro_window: int) -> None:
        self.retro_window = retro_window
        self._entries: dict[tuple[str, int], list[Reward]] = {}

    def add(self, reward: Reward, receive_tick: int) -> AggregatedReward:
        """Record a reward received at ``receive_tick`` and return the updated
        aggregate for its target."""
        if reward.target_tick > receive_tick:
            raise ProtocolError(
                f"reward targets future tick {reward.target_tick} at tick {receive_tick}"
            )
        if receive_tick - reward.target_tick > self.retro_window:
            raise RetroWindowExceeded(
                f"target tick {reward.target_tick} is outside the {self.retro_window}-tick window at tick {receive_tick}"
            )
        key = (reward.target_actor, reward.target_tick)
        self._entries.setdefault(key, []).append(reward)
        return self.aggregated(reward.target_actor, reward.target_tick)  # type: ignore[return-value]

    def aggregated(self, actor: str, target_tick: int) -> AggregatedReward | None:
        entry = self._entries.get((actor, target_tick))
        if not entry:
            return None
        return aggregate(actor, target_tick, entry)

    def table(self) -> list[AggregatedReward]:
        """All aggregates, sorted by (actor, target_tick)."""
        return [
            aggregate(actor, tick, rewards)
            for (actor, tick), rewards in sorted(self._entries.items())
        ]

    def totals(self) -> dict[str, float]:
        """Per-actor total: the exact-summed aggregated values across target ticks."""
        per_actor: dict[str, list[float]] = {}
        for agg in self.table():
            per_actor.setdefault(agg.actor, []).append(agg.value)
        return {actor: math.fsum(values) for actor, values in per_actor.items()}

    def actors(self) -> set[str]:
        return {actor for actor, _ in self._entries}


def totals_from_aggregates(aggregates: Iterable[AggregatedReward]) -> dict[str, float]:
    per_actor: dict[str, list[float]] = {}
    for agg in aggregates:
        per_actor.setdefault(agg.actor, []).append(agg.value)
    return {actor: math.fsum(values) for actor, values in per_actor.items()}
