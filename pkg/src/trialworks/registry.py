"""Service registration and pre-trial endpoint resolution.

The registry is the configurator half of the system: actor and environment
services register (class, implementation, endpoint) tuples, refresh them with
heartbeats, and the pre-trial hook resolves every implementation name in a
trial configuration to a concrete live endpoint, balancing load by seeded
uniform choice so a trial's resolution is reproducible.

Environment services register under the reserved class name ``environment``.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, replace

from .protocol import TrialParams

ENVIRONMENT_CLASS = "environment"

# Fixed salt mixed into the trial seed so hook randomness is decoupled from
# every other per-trial random stream.
HOOK_SALT = 0x9E3779B97F4A7C15

DEFAULT_LIVENESS_WINDOW_S = 10.0


class ConflictError(Exception):
    """The (implementation, endpoint) pair is already registered under another class."""


class ResolutionError(Exception):
    """No live endpoint serves the requested implementation; names the slot."""

    def __init__(self, slot_name: str, implementation: str) -> None:
        super().__init__(f"{slot_name}: no live endpoint for implementation {implementation!r}")
        self.slot_name = slot_name
        self.implementation = implementation


@dataclass(slots=True)
class ServiceRecord:
    class_name: str
    implementation: str
    endpoint: str
    last_heartbeat: float


class Registry:
    """In-process service directory guarded by the event loop's serialization;
    resolution works from a consistent snapshot of live records."""

    def __init__(self, liveness_window_s: float = DEFAULT_LIVENESS_WINDOW_S, now=time.monotonic) -> None:
        self.liveness_window_s = liveness_window_s
        self._now = now
        self._records: dict[tuple[str, str], ServiceRecord] = {}

    def register(self, class_name: str, implementation: str, endpoint: str) -> None:
        """Insert a record or refresh its heartbeat; idempotent for identical tuples."""
        if not endpoint or not isinstance(endpoint, str):
            raise ValueError(f"invalid endpoint {endpoint!r}")
        key = (implementation, endpoint)
        existing = self._records.get(key)
        if existing is not None and existing.class_name != class_name:
            raise ConflictError(
                f"{key} already registered under class {existing.class_name!r}, not {class_name!r}"
            )
        if existing is not None:
            existing.last_heartbeat = self._now()
        else:
            self._records[key] = ServiceRecord(class_name, implementation, endpoint, self._now())

    def heartbeat(self, implementation: str, endpoint: str) -> bool:
        record = self._records.get((implementation, endpoint))
        if record is None:
            return False
        record.last_heartbeat = self._now()
        return True

    def drop(self, implementation: str, endpoint: str) -> None:
        self._records.pop((implementation, endpoint), None)

    def sweep(self) -> None:
        """Remove records whose heartbeat age exceeds the liveness window."""
        cutoff = self._now() - self.liveness_window_s
        stale = [key for key, rec in self._records.items() if rec.last_heartbeat < cutoff]
        for key in stale:
            del self._records[key]

    def _live(self, record: ServiceRecord, now: float) -> bool:
        return now - record.last_heartbeat <= self.liveness_window_s

    def candidates(self, class_name: str, implementation: str) -> list[str]:
        """Live endpoints for an implementation, in deterministic order."""
        now = self._now()
        return sorted(
            rec.endpoint
            for rec in self._records.values()
            if rec.class_name == class_name
            and rec.implementation == implementation
            and self._live(rec, now)
        )

    def records(self) -> list[ServiceRecord]:
        now = self._now()
        return [replace(rec) for rec in self._records.values() if self._live(rec, now)]

    def pre_trial_hook(self, params: TrialParams) -> TrialParams:
        """Fill the environment endpoint and every non-client slot's endpoint
        with a uniform-random live candidate, seeded from the trial seed."""
        rng = random.Random((params.seed ^ HOOK_SALT) & 0xFFFFFFFFFFFFFFFF)

        env_candidates = self.candidates(ENVIRONMENT_CLASS, params.env_implementation)
        if not env_candidates:
            raise ResolutionError("environment", params.env_implementation)
        env_endpoint = env_candidates[rng.randrange(len(env_candidates))]

        slots = []
        for slot in params.actor_slots:
            if slot.is_client:
                slots.append(slot)
                continue
            candidates = self.candidates(slot.class_name, slot.implementation)
            if not candidates:
                raise ResolutionError(slot.actor_name, slot.implementation)
            endpoint = candidates[rng.randrange(len(candidates))]
            slots.append(replace(slot, endpoint=endpoint))
        return replace(params, env_endpoint=env_endpoint, actor_slots=tuple(slots))
