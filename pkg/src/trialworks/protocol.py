"""Wire protocol: typed envelopes, canonical framing, and payload schemas.

Every component (orchestrator, services, CLI, browser clients, log files)
speaks the same unit: an :class:`Envelope` serialized as canonical JSON
(lexicographically sorted keys, no insignificant whitespace, UTF-8).  Stream
transports carry frames prefixed with a 4-byte big-endian length; browser
socket transports carry the identical JSON text with the transport's own
frame boundary.

The functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Iterator

FRAME_HEADER = struct.Struct(">I")

# Message types carried over live transports.
WIRE_MSG_TYPES = frozenset({
    "register_service",
    "register_ack",
    "start_trial",
    "trial_state",
    "join_trial",
    "join_ack",
    "observation_set",
    "action",
    "reward",
    "message",
    "end_trial",
    "trial_ended",
    "heartbeat",
    "error",
})

# Message types that only appear inside datalog files or checkpoint files,
# reusing the exact same frame encoding.
LOG_MSG_TYPES = frozenset({"log_header", "tick_sample", "log_footer"})
CHECKPOINT_MSG_TYPE = "model_checkpoint"

MSG_TYPES = WIRE_MSG_TYPES | LOG_MSG_TYPES | {CHECKPOINT_MSG_TYPE}

PARTICIPANT_KINDS = frozenset({"environment", "actor", "controller", "observer", "orchestrator"})

TRIAL_STATES = ("pending", "initializing", "waiting_for_clients", "running", "terminating", "ended")

MAX_SEED = 2**64 - 1


class ProtocolError(Exception):
    """Malformed traffic: unknown message type, bad field, broken invariant."""


class EncodeError(ProtocolError):
    """Envelope cannot be serialized (non-finite number, unsupported value)."""


class NeedMoreBytes(Exception):
    """The buffer does not yet hold a complete frame."""

    def __init__(self, needed: int = 0) -> None:
        super().__init__(f"incomplete frame, need at least {needed} more bytes")
        self.needed = needed


class SchemaViolation(ProtocolError):
    """A value does not match its declared schema; ``path`` names the first offender."""

    def __init__(self, path: str, detail: str = "") -> None:
        super().__init__(f"{path}: {detail}" if detail else path)
        self.path = path
        self.detail = detail


@dataclass(frozen=True, slots=True)
class ParticipantId:
    kind: str
    name: str

    def __post_init__(self) -> None:
        if self.kind not in PARTICIPANT_KINDS:
            raise ProtocolError(f"unknown participant kind {self.kind!r}")
        if not self.name:
            raise ProtocolError("participant name must be non-empty")

    def to_payload(self) -> dict[str, str]:
        return {"kind": self.kind, "name": self.name}

    @classmethod
    def from_payload(cls, obj: Any) -> "ParticipantId":
        if not isinstance(obj, dict):
            raise ProtocolError(f"participant must be an object, got {type(obj).__name__}")
        kind = obj.get("kind")
        name = obj.get("name")
        if not isinstance(kind, str) or not isinstance(name, str):
            raise ProtocolError("participant requires string 'kind' and 'name'")
        return cls(kind=kind, name=name)


ORCHESTRATOR = ParticipantId("orchestrator", "orchestrator")
ENVIRONMENT = ParticipantId("environment", "env")


@dataclass(frozen=True, slots=True)
class Envelope:
    """The universal message: one typed payload addressed within a trial."""

    msg_type: str
    trial_id: str
    tick_id: int
    sender: ParticipantId
    payload: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if self.msg_type not in MSG_TYPES:
            raise ProtocolError(f"unknown msg_type {self.msg_type!r}")
        if not isinstance(self.tick_id, int) or isinstance(self.tick_id, bool) or self.tick_id < 0:
            raise ProtocolError(f"tick_id must be a non-negative integer, got {self.tick_id!r}")
        if not isinstance(self.payload, dict):
            raise ProtocolError("payload must be an object")


@dataclass(frozen=True, slots=True)
class SchemaRef:
    schema_name: str
    version: int

    def __post_init__(self) -> None:
        if self.version < 1:
            raise ProtocolError("schema version must be >= 1")

    def to_payload(self) -> list[Any]:
        return [self.schema_name, self.version]


@dataclass(frozen=True, slots=True)
class Reward:
    """One unit of evaluative feedback, possibly aimed at a past tick."""

    value: float
    confidence: float
    source: ParticipantId
    target_actor: str
    target_tick: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ProtocolError("reward value must be finite")
        if not (0.0 < self.confidence <= 1.0):
            raise ProtocolError(f"confidence must lie in (0, 1], got {self.confidence}")
        if self.target_tick < 0:
            raise ProtocolError("target_tick must be non-negative")

    def to_payload(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "confidence": self.confidence,
            "source": self.source.to_payload(),
            "target_actor": self.target_actor,
            "target_tick": self.target_tick,
        }

    @classmethod
    def from_payload(cls, obj: Any) -> "Reward":
        if not isinstance(obj, dict):
            raise ProtocolError("reward must be an object")
        try:
            value = obj["value"]
            confidence = obj["confidence"]
            source = ParticipantId.from_payload(obj["source"])
            target_actor = obj["target_actor"]
            target_tick = obj["target_tick"]
        except KeyError as exc:
            raise ProtocolError(f"reward missing field {exc.args[0]!r}") from None
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ProtocolError("reward value must be a number")
        if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
            raise ProtocolError("reward confidence must be a number")
        if not isinstance(target_actor, str) or not target_actor:
            raise ProtocolError("reward target_actor must be a non-empty string")
        if not isinstance(target_tick, int) or isinstance(target_tick, bool):
            raise ProtocolError("reward target_tick must be an integer")
        return cls(float(value), float(confidence), source, target_actor, target_tick)


# ---------------------------------------------------------------------------
# Frame codec
# ---------------------------------------------------------------------------

def _canonical_json(obj: Any) -> str:
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except ValueError as exc:
        raise EncodeError(str(exc)) from None
    except TypeError as exc:
        raise EncodeError(str(exc)) from None


def encode_envelope_text(envelope: Envelope) -> str:
    """Canonical JSON text of an envelope, as carried in browser socket frames."""
    envelope.validate()
    obj = {
        "msg_type": envelope.msg_type,
        "trial_id": envelope.trial_id,
        "tick_id": envelope.tick_id,
        "sender": envelope.sender.to_payload(),
        "payload": envelope.payload,
    }
    return _canonical_json(obj)


def encode_frame(envelope: Envelope) -> bytes:
    """Length-prefixed canonical encoding for stream transports and log files."""
    body = encode_envelope_text(envelope).encode("utf-8")
    return FRAME_HEADER.pack(len(body)) + body


def _envelope_from_obj(obj: Any) -> Envelope:
    if not isinstance(obj, dict):
        raise ProtocolError("envelope must be an object")
    msg_type = obj.get("msg_type")
    if not isinstance(msg_type, str):
        raise ProtocolError("envelope missing msg_type")
    if msg_type not in MSG_TYPES:
        raise ProtocolError(msg_type)
    trial_id = obj.get("trial_id")
    if not isinstance(trial_id, str):
        raise ProtocolError("trial_id must be a string")
    tick_id = obj.get("tick_id")
    if not isinstance(tick_id, int) or isinstance(tick_id, bool) or tick_id < 0:
        raise ProtocolError("tick_id must be a non-negative integer")
    sender = ParticipantId.from_payload(obj.get("sender"))
    payload = obj.get("payload")
    if not isinstance(payload, dict):
        raise ProtocolError("payload must be an object")
    # Unknown payload fields ride along untouched; unknown top-level keys are
    # ignored so older decoders survive extended envelopes.
    return Envelope(msg_type=msg_type, trial_id=trial_id, tick_id=tick_id, sender=sender, payload=payload)


def decode_envelope_text(text: str) -> Envelope:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed envelope text: {exc}") from None
    return _envelope_from_obj(obj)


def decode_frame(data: bytes | bytearray | memoryview, offset: int = 0) -> tuple[Envelope, int]:
    """Decode one frame starting at ``offset``.

    Returns ``(envelope, consumed)`` where ``consumed`` counts header plus
    body bytes, so callers can stream concatenated frames.
    """
    view = memoryview(data)[offset:]
    if len(view) < FRAME_HEADER.size:
        raise NeedMoreBytes(FRAME_HEADER.size - len(view))
    (length,) = FRAME_HEADER.unpack_from(view)
    total = FRAME_HEADER.size + length
    if len(view) < total:
        raise NeedMoreBytes(total - len(view))
    body = bytes(view[FRAME_HEADER.size:total])
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"frame body is not valid UTF-8: {exc}") from None
    return decode_envelope_text(text), total


def decode_frames(data: bytes | bytearray) -> tuple[list[Envelope], int]:
    """Decode every complete frame in ``data``; returns envelopes and bytes consumed."""
    envelopes: list[Envelope] = []
    offset = 0
    while True:
        try:
            envelope, consumed = decode_frame(data, offset)
        except NeedMoreBytes:
            return envelopes, offset
        envelopes.append(envelope)
        offset += consumed


# ---------------------------------------------------------------------------
# Payload schemas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Num:
    lo: float | None = None
    hi: float | None = None

    def check(self, value: Any, path: str) -> None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaViolation(path, "expected a number")
        if not math.isfinite(value):
            raise SchemaViolation(path, "must be finite")
        if self.lo is not None and value < self.lo:
            raise SchemaViolation(path, f"below minimum {self.lo}")
        if self.hi is not None and value > self.hi:
            raise SchemaViolation(path, f"above maximum {self.hi}")


@dataclass(frozen=True)
class _Int:
    lo: int | None = None

    def check(self, value: Any, path: str) -> None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaViolation(path, "expected an integer")
        if self.lo is not None and value < self.lo:
            raise SchemaViolation(path, f"below minimum {self.lo}")


@dataclass(frozen=True)
class _Bool:
    def check(self, value: Any, path: str) -> None:
        if not isinstance(value, bool):
            raise SchemaViolation(path, "expected a boolean")


@dataclass(frozen=True)
class _Str:
    def check(self, value: Any, path: str) -> None:
        if not isinstance(value, str):
            raise SchemaViolation(path, "expected a string")


@dataclass(frozen=True)
class _List:
    item: Any

    def check(self, value: Any, path: str) -> None:
        if not isinstance(value, list):
            raise SchemaViolation(path, "expected a list")
        for i, entry in enumerate(value):
            self.item.check(entry, f"{path}[{i}]")


@dataclass(frozen=True)
class _Obj:
    fields: tuple[tuple[str, Any], ...]

    def check(self, value: Any, path: str) -> None:
        if not isinstance(value, dict):
            raise SchemaViolation(path, "expected an object")
        prefix = f"{path}." if path else ""
        for name, spec in self.fields:
            if name not in value:
                raise SchemaViolation(f"{prefix}{name}", "missing field")
            spec.check(value[name], f"{prefix}{name}")
        declared = {name for name, _ in self.fields}
        for name in sorted(value.keys() - declared):
            raise SchemaViolation(f"{prefix}{name}", "undeclared field")


_ARENA_ACTION = _Obj((
    ("fire", _Bool()),
    ("strafe", _Num(-1.0, 1.0)),
    ("forward", _Num(-1.0, 1.0)),
    ("rotate", _Num(-1.0, 1.0)),
))

_ARENA_OBS = _Obj((
    ("self", _Obj((
        ("x", _Num()),
        ("y", _Num()),
        ("theta", _Num()),
        ("alive", _Bool()),
    ))),
    ("visible_players", _List(_Obj((
        ("x", _Num()),
        ("y", _Num()),
        ("theta", _Num()),
        ("team_is_opponent", _Bool()),
        ("alive", _Bool()),
    )))),
    ("visible_projectiles", _List(_Obj((
        ("x", _Num()),
        ("y", _Num()),
        ("vx", _Num()),
        ("vy", _Num()),
    )))),
    ("tick_id", _Int(0)),
))

_ARENA_WORLD = _Obj((
    ("arena_size", _Num(lo=0.0)),
    ("fov_half_angle", _Num(lo=0.0)),
    ("fov_range", _Num(lo=0.0)),
    ("tick_id", _Int(0)),
    ("players", _List(_Obj((
        ("name", _Str()),
        ("team", _Int(0)),
        ("x", _Num()),
        ("y", _Num()),
        ("theta", _Num()),
        ("alive", _Bool()),
        ("cooldown", _Int(0)),
    )))),
    ("projectiles", _List(_Obj((
        ("x", _Num()),
        ("y", _Num()),
        ("vx", _Num()),
        ("vy", _Num()),
        ("team", _Int(0)),
    )))),
))

# Compiled-in schema table; there is deliberately no runtime IDL.
SCHEMA_TABLE: dict[tuple[str, int], _Obj] = {
    ("arena_action", 1): _ARENA_ACTION,
    ("arena_obs", 1): _ARENA_OBS,
    ("arena_world", 1): _ARENA_WORLD,
}


def validate_against_schema(value: Any, schema: SchemaRef) -> None:
    """Check ``value`` has exactly the fields, types, and ranges the schema declares."""
    key = (schema.schema_name, schema.version)
    spec = SCHEMA_TABLE.get(key)
    if spec is None:
        raise ProtocolError(f"schema {schema.schema_name!r} v{schema.version} not registered")
    spec.check(value, "")


# ---------------------------------------------------------------------------
# Actor classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ActorClass:
    """The contract shared by every actor of one kind: schemas plus the
    substitute action used when an actor misses its tick."""

    class_name: str
    observation_schema: SchemaRef
    action_schema: SchemaRef | None
    default_action: dict[str, Any] | None
    participant_kind: str = "actor"

    @property
    def acts(self) -> bool:
        return self.action_schema is not None


ACTOR_CLASSES: dict[str, ActorClass] = {
    "player": ActorClass(
        class_name="player",
        observation_schema=SchemaRef("arena_obs", 1),
        action_schema=SchemaRef("arena_action", 1),
        default_action={"fire": False, "strafe": 0.0, "forward": 0.0, "rotate": 0.0},
    ),
    "observer": ActorClass(
        class_name="observer",
        observation_schema=SchemaRef("arena_world", 1),
        action_schema=None,
        default_action=None,
        participant_kind="observer",
    ),
}


# ---------------------------------------------------------------------------
# Trial configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ActorSlot:
    actor_name: str
    class_name: str
    implementation: str
    endpoint: str | None = None
    is_client: bool = False

    def to_payload(self) -> dict[str, Any]:
        return {
            "actor_name": self.actor_name,
            "class_name": self.class_name,
            "implementation": self.implementation,
            "endpoint": self.endpoint,
            "is_client": self.is_client,
        }


@dataclass(frozen=True, slots=True)
class TrialParams:
    """Full configuration of one trial, before and after endpoint resolution."""

    env_implementation: str
    env_config: dict[str, Any]
    actor_slots: tuple[ActorSlot, ...]
    max_tick: int
    trial_id: str = ""
    retro_window: int = 32
    action_timeout_ms: int = 1000
    tick_interval_ms: int = 0
    seed: int = 0
    env_endpoint: str | None = None

    def slot(self, actor_name: str) -> ActorSlot | None:
        for s in self.actor_slots:
            if s.actor_name == actor_name:
                return s
        return None

    def to_payload(self) -> dict[str, Any]:
        return {
            "trial_id": self.trial_id,
            "env_implementation": self.env_implementation,
            "env_config": self.env_config,
            "env_endpoint": self.env_endpoint,
            "actor_slots": [s.to_payload() for s in self.actor_slots],
            "max_tick": self.max_tick,
            "retro_window": self.retro_window,
            "action_timeout_ms": self.action_timeout_ms,
            "tick_interval_ms": self.tick_interval_ms,
            "seed": self.seed,
        }


def _expect(obj: dict, key: str, types: type | tuple, path: str, default: Any = ...) -> Any:
    if key not in obj:
        if default is not ...:
            return default
        raise SchemaViolation(f"{path}{key}", "missing field")
    value = obj[key]
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaViolation(f"{path}{key}", "wrong type")
    if not isinstance(value, types):
        raise SchemaViolation(f"{path}{key}", "wrong type")
    return value


def params_from_payload(obj: Any) -> TrialParams:
    """Parse and statically validate trial parameters, raising
    :class:`SchemaViolation` with the offending field path."""
    if not isinstance(obj, dict):
        raise SchemaViolation("", "trial params must be an object")
    trial_id = _expect(obj, "trial_id", str, "", default="")
    env_implementation = _expect(obj, "env_implementation", str, "")
    if not env_implementation:
        raise SchemaViolation("env_implementation", "must be non-empty")
    env_config = _expect(obj, "env_config", dict, "", default={})
    env_endpoint = obj.get("env_endpoint")
    if env_endpoint is not None and not isinstance(env_endpoint, str):
        raise SchemaViolation("env_endpoint", "wrong type")
    raw_slots = _expect(obj, "actor_slots", list, "")
    if not raw_slots:
        raise SchemaViolation("actor_slots", "must be non-empty")
    slots: list[ActorSlot] = []
    seen_names: set[str] = set()
    for i, raw in enumerate(raw_slots):
        path = f"actor_slots[{i}]."
        if not isinstance(raw, dict):
            raise SchemaViolation(f"actor_slots[{i}]", "expected an object")
        actor_name = _expect(raw, "actor_name", str, path)
        if not actor_name or actor_name == "*":
            raise SchemaViolation(f"{path}actor_name", "invalid actor name")
        if actor_name in seen_names:
            raise SchemaViolation(f"{path}actor_name", "duplicate actor name")
        seen_names.add(actor_name)
        class_name = _expect(raw, "class_name", str, path)
        if class_name not in ACTOR_CLASSES:
            raise SchemaViolation(f"{path}class_name", f"unknown actor class {class_name!r}")
        implementation = _expect(raw, "implementation", str, path)
        if not implementation:
            raise SchemaViolation(f"{path}implementation", "must be non-empty")
        endpoint = raw.get("endpoint")
        if endpoint is not None and not isinstance(endpoint, str):
            raise SchemaViolation(f"{path}endpoint", "wrong type")
        is_client = _expect(raw, "is_client", bool, path, default=False)
        if is_client and endpoint is not None:
            raise SchemaViolation(f"{path}endpoint", "client slots never carry an endpoint")
        slots.append(ActorSlot(actor_name, class_name, implementation, endpoint, is_client))
    max_tick = _expect(obj, "max_tick", int, "")
    if max_tick < 1:
        raise SchemaViolation("max_tick", "must be >= 1")
    retro_window = _expect(obj, "retro_window", int, "", default=32)
    if retro_window < 0:
        raise SchemaViolation("retro_window", "must be >= 0")
    if retro_window > max_tick:
        raise SchemaViolation("retro_window", "must not exceed max_tick")
    action_timeout_ms = _expect(obj, "action_timeout_ms", int, "", default=1000)
    if action_timeout_ms < 1:
        raise SchemaViolation("action_timeout_ms", "must be positive")
    tick_interval_ms = _expect(obj, "tick_interval_ms", int, "", default=0)
    if tick_interval_ms < 0:
        raise SchemaViolation("tick_interval_ms", "must be >= 0")
    seed = _expect(obj, "seed", int, "", default=0)
    if not (0 <= seed <= MAX_SEED):
        raise SchemaViolation("seed", "must fit an unsigned 64-bit integer")
    return TrialParams(
        trial_id=trial_id,
        env_implementation=env_implementation,
        env_config=env_config,
        env_endpoint=env_endpoint,
        actor_slots=tuple(slots),
        max_tick=max_tick,
        retro_window=retro_window,
        action_timeout_ms=action_timeout_ms,
        tick_interval_ms=tick_interval_ms,
        seed=seed,
    )


def with_trial_id(params: TrialParams, trial_id: str) -> TrialParams:
    return replace(params, trial_id=trial_id)


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit stream seed for a named role within a trial."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
