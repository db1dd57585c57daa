"""Append-only trial activity logs and their replay.

One file per trial (``<trial_id>.twlog``), holding wire-encoded frames:
``log_header``, then one ``tick_sample`` per tick, then ``log_footer``.
Retroactive rewards are stored raw at their receive tick; replay re-attaches
them to the tick they target, so offline consumers see rewards where they
apply, with values identical to what the live actor stream delivered.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .protocol import (
    Envelope,
    NeedMoreBytes,
    ORCHESTRATOR,
    ParticipantId,
    ProtocolError,
    Reward,
    decode_frame,
    encode_frame,
)
from .rewards import AggregatedReward, aggregate

LOG_SUFFIX = ".twlog"


class LogOrderError(Exception):
    """Log parts arrived out of the header/samples/footer order."""


class LogIoError(Exception):
    """The underlying file failed; the trial continues with logging degraded."""


class ReplayError(Exception):
    """A frame could not be decoded; carries the byte offset of the bad frame."""

    def __init__(self, offset: int, detail: str) -> None:
        super().__init__(f"corrupt log at byte {offset}: {detail}")
        self.offset = offset


class EmptyLog(Exception):
    """The log holds no transitions to sample from."""


@dataclass(frozen=True, slots=True)
class ActionRecord:
    action: dict[str, Any]
    defaulted: bool


@dataclass(frozen=True, slots=True)
class MessageRecord:
    sender: ParticipantId
    recipient: ParticipantId
    body: Any


@dataclass(frozen=True, slots=True)
class TickSample:
    """Everything that happened in one tick of one trial."""

    trial_id: str
    tick_id: int
    observations: dict[str, dict[str, Any]]
    actions: dict[str, ActionRecord]
    rewards_received: tuple[Reward, ...]
    messages: tuple[MessageRecord, ...]

    def __post_init__(self) -> None:
        extra = self.actions.keys() - self.observations.keys()
        if extra:
            raise ValueError(f"actions without observations: {sorted(extra)}")
        for r in self.rewards_received:
            if r.target_tick > self.tick_id:
                raise ValueError(
                    f"reward targets tick {r.target_tick} but was received at {self.tick_id}"
                )

    def to_payload(self) -> dict[str, Any]:
        return {
            "observations": self.observations,
            "actions": {
                name: {"action": rec.action, "defaulted": rec.defaulted}
                for name, rec in self.actions.items()
            },
            "rewards_received": [r.to_payload() for r in self.rewards_received],
            "messages": [
                {"from": m.sender.to_payload(), "to": m.recipient.to_payload(), "body": m.body}
                for m in self.messages
            ],
        }

    @classmethod
    def from_payload(cls, trial_id: str, tick_id: int, obj: dict[str, Any]) -> "TickSample":
        return cls(
            trial_id=trial_id,
            tick_id=tick_id,
            observations=obj["observations"],
            actions={
                name: ActionRecord(rec["action"], rec["defaulted"])
                for name, rec in obj["actions"].items()
            },
            rewards_received=tuple(Reward.from_payload(r) for r in obj["rewards_received"]),
            messages=tuple(
                MessageRecord(
                    ParticipantId.from_payload(m["from"]),
                    ParticipantId.from_payload(m["to"]),
                    m["body"],
                )
                for m in obj["messages"]
            ),
        )


class LogWriter:
    """Single-writer, append-only log for one trial.

    Order is enforced (header, samples with consecutive ticks, footer).  An
    I/O failure marks the writer degraded instead of killing the trial; the
    footer write is flushed and fsynced for durability.
    """

    def __init__(self, directory: str | Path, trial_id: str) -> None:
        self.trial_id = trial_id
        self.path = Path(directory) / f"{trial_id}{LOG_SUFFIX}"
        self.degraded = False
        self._stage = "header"
        self._next_tick = 0
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "wb")
        except OSError as exc:
            self.degraded = True
            self._file = None
            raise LogIoError(str(exc)) from exc

    def _write(self, envelope: Envelope, *, durable: bool = False) -> None:
        if self.degraded or self._file is None:
            return
        try:
            self._file.write(encode_frame(envelope))
            self._file.flush()
            if durable:
                os.fsync(self._file.fileno())
        except OSError:
            self.degraded = True

    def write_header(self, params_payload: dict[str, Any], schema_versions: dict[str, Any],
                     start_time: float) -> None:
        if self._stage != "header":
            raise LogOrderError(f"header after {self._stage}")
        self._stage = "samples"
        self._write(Envelope(
            msg_type="log_header",
            trial_id=self.trial_id,
            tick_id=0,
            sender=ORCHESTRATOR,
            payload={
                "params": params_payload,
                "schema_versions": schema_versions,
                "start_time": start_time,
            },
        ))

    def write_sample(self, sample: TickSample) -> None:
        if self._stage != "samples":
            raise LogOrderError(f"sample in stage {self._stage}")
        if sample.tick_id != self._next_tick:
            raise LogOrderError(f"expected tick {self._next_tick}, got {sample.tick_id}")
        self._next_tick += 1
        self._write(Envelope(
            msg_type="tick_sample",
            trial_id=self.trial_id,
            tick_id=sample.tick_id,
            sender=ORCHESTRATOR,
            payload=sample.to_payload(),
        ))

    def write_footer(self, reason: str, aggregates: list[AggregatedReward]) -> None:
        if self._stage == "header":
            raise LogOrderError("footer before header")
        if self._stage == "done":
            raise LogOrderError("duplicate footer")
        self._stage = "done"
        self._write(Envelope(
            msg_type="log_footer",
            trial_id=self.trial_id,
            tick_id=self._next_tick,
            sender=ORCHESTRATOR,
            payload={
                "reason": reason,
                "total_ticks": self._next_tick,
                "aggregates": [a.to_payload() for a in aggregates],
            },
        ), durable=True)
        self.close()

    def close(self) -> None:
        if self._file is not None:
            try:
                self._file.close()
            except OSError:
                self.degraded = True
            self._file = None


@dataclass
class TrialReplay:
    """A decoded trial log with per-tick aggregated rewards materialized."""

    path: Path
    header: dict[str, Any] | None = None
    samples: list[TickSample] = field(default_factory=list)
    footer: dict[str, Any] | None = None
    truncated: bool = False
    # target_tick -> actor -> aggregate over every raw reward in the log
    aggregates_by_tick: dict[int, dict[str, AggregatedReward]] = field(default_factory=dict)

    @property
    def total_ticks(self) -> int:
        return len(self.samples)

    @property
    def end_reason(self) -> str | None:
        return self.footer["reason"] if self.footer else None

    def aggregate_table(self) -> list[AggregatedReward]:
        """Aggregates ordered by (actor, target_tick), the footer table order."""
        entries = [
            (actor, tick)
            for tick, by_actor in self.aggregates_by_tick.items()
            for actor in by_actor
        ]
        return [self.aggregates_by_tick[tick][actor] for actor, tick in sorted(entries)]

    def totals(self) -> dict[str, float]:
        import math
        per_actor: dict[str, list[float]] = {}
        for agg in self.aggregate_table():
            per_actor.setdefault(agg.actor, []).append(agg.value)
        return {actor: math.fsum(v) for actor, v in per_actor.items()}

    def __iter__(self) -> Iterator[tuple[TickSample, dict[str, AggregatedReward]]]:
        """Samples in tick order, each with the aggregated rewards that apply
        to that tick (retroactive contributions already re-attached)."""
        for sample in self.samples:
            yield sample, self.aggregates_by_tick.get(sample.tick_id, {})


def replay(path: str | Path) -> TrialReplay:
    """Decode a complete or truncated trial log.

    Truncated logs yield every complete frame and set ``truncated``; a frame
    that cannot be decoded raises :class:`ReplayError` with its byte offset.
    A footer whose aggregate table disagrees with recomputation from the raw
    samples is treated as corruption.
    """
    path = Path(path)
    data = path.read_bytes()
    result = TrialReplay(path=path)
    raw_rewards: dict[tuple[str, int], list[Reward]] = {}
    offset = 0
    expected_tick = 0
    while offset < len(data):
        try:
            envelope, consumed = decode_frame(data, offset)
        except NeedMoreBytes:
            result.truncated = True
            break
        except ProtocolError as exc:
            raise ReplayError(offset, str(exc)) from exc
        if envelope.msg_type == "log_header":
            if result.header is not None or result.samples:
                raise ReplayError(offset, "unexpected second header")
            result.header = envelope.payload
        elif envelope.msg_type == "tick_sample":
            if result.header is None:
                raise ReplayError(offset, "sample before header")
            if result.footer is not None:
                raise ReplayError(offset, "sample after footer")
            if envelope.tick_id != expected_tick:
                raise ReplayError(offset, f"expected tick {expected_tick}, got {envelope.tick_id}")
            expected_tick += 1
            try:
                sample = TickSample.from_payload(envelope.trial_id, envelope.tick_id, envelope.payload)
            except (KeyError, TypeError, ValueError, ProtocolError) as exc:
                raise ReplayError(offset, f"bad tick_sample payload: {exc}") from exc
            result.samples.append(sample)
            for reward in sample.rewards_received:
                raw_rewards.setdefault((reward.target_actor, reward.target_tick), []).append(reward)
        elif envelope.msg_type == "log_footer":
            if result.header is None:
                raise ReplayError(offset, "footer before header")
            result.footer = envelope.payload
        else:
            raise ReplayError(offset, f"unexpected frame type {envelope.msg_type!r}")
        offset += consumed

    if result.footer is None:
        result.truncated = True

    for (actor, tick), rewards in raw_rewards.items():
        result.aggregates_by_tick.setdefault(tick, {})[actor] = aggregate(actor, tick, rewards)

    if result.footer is not None:
        recomputed = [a.to_payload() for a in result.aggregate_table()]
        stored = result.footer.get("aggregates")
        if stored != recomputed:
            raise ReplayError(offset, "footer aggregate table does not match raw samples")
        if result.footer.get("total_ticks") != len(result.samples):
            raise ReplayError(offset, "footer tick count does not match samples")
    return result


def sample_batch(path: str | Path, batch_size: int, rng_seed: int) -> list[tuple[dict, dict, float]]:
    """Uniform sample with replacement over every (actor, tick) transition.

    Each transition is (observation, action, aggregated reward value), with
    0.0 for ticks no reward targeted.  Reproducible per seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    log = replay(path)
    transitions: list[tuple[dict, dict, float]] = []
    for sample, aggregates in log:
        for actor, record in sample.actions.items():
            agg = aggregates.get(actor)
            transitions.append((
                sample.observations[actor],
                record.action,
                agg.value if agg is not None else 0.0,
            ))
    if not transitions:
        raise EmptyLog(str(path))
    rng = random.Random(rng_seed)
    return [transitions[rng.randrange(len(transitions))] for _ in range(batch_size)]
