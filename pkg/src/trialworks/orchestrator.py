"""The orchestrator: runs trials end to end.

Each trial is one strictly sequential tick loop — fan out observations,
gather actions (substituting class defaults on timeout or disconnect), hand
actions to the environment, route the rewards and messages that surfaced,
log the tick — while the orchestrator multiplexes any number of such loops
and their sessions on one event loop.  Cross-trial shared state is limited
to the registry and the metrics sink.  Envelope delivery per session is
FIFO: every send goes through the session's ordered outbox.
"""

from __future__ import annotations

import asyncio
import logging
import time
import uuid
from typing import Any

from .datalog import ActionRecord, LogWriter, MessageRecord, TickSample
from .metrics import MetricsSink
from .protocol import (
    ACTOR_CLASSES,
    ENVIRONMENT,
    Envelope,
    ORCHESTRATOR,
    ParticipantId,
    ProtocolError,
    Reward,
    SchemaViolation,
    TrialParams,
    params_from_payload,
    validate_against_schema,
    with_trial_id,
)
from .registry import ConflictError, Registry, ResolutionError
from .rewards import RetroWindowExceeded, RewardLedger
from .sessions import LocalDirectory, Session, StreamSession, dial

log = logging.getLogger(__name__)

DEFAULT_TCP_PORT = 9000
DEFAULT_JOIN_TIMEOUT_MS = 30_000
SETUP_TIMEOUT_S = 10.0
ENV_STEP_TIMEOUT_S = 60.0

_TERMINATE = "__terminate__"
_FLUSH = object()


class NotFound(Exception):
    """The trial does not exist (or has already ended, for terminate calls)."""


class _EnvironmentLost(Exception):
    pass


class _SetupFailed(Exception):
    pass


class _SessionLink:
    """Ordered outbox in front of a session: sends are enqueued synchronously
    and drained by one writer task, so per-session delivery stays FIFO."""

    def __init__(self, session: Session) -> None:
        self.session = session
        self.broken = False
        self._queue: asyncio.Queue = asyncio.Queue()
        self._task = asyncio.get_running_loop().create_task(self._drain())

    async def _drain(self) -> None:
        while True:
            item = await self._queue.get()
            if item is _FLUSH:
                return
            if self.broken:
                continue
            try:
                await self.session.send(item)
            except (ConnectionError, OSError):
                self.broken = True

    def send_nowait(self, envelope: Envelope) -> None:
        if not self.broken:
            self._queue.put_nowait(envelope)

    async def flush_and_close(self) -> None:
        self._queue.put_nowait(_FLUSH)
        try:
            await asyncio.wait_for(self._task, 5.0)
        except (asyncio.TimeoutError, asyncio.CancelledError):
            self._task.cancel()
        await self.session.close()


class Watcher:
    def __init__(self, filt: str) -> None:
        self.filter = filt
        self.queue: asyncio.Queue[tuple[str, str, str | None, dict[str, Any]]] = asyncio.Queue()

    def matches(self, trial_id: str) -> bool:
        return self.filter == "*" or self.filter == trial_id


class Trial:
    def __init__(self, params: TrialParams) -> None:
        self.params = params
        self.state = "pending"
        self.reason: str | None = None
        self.tick = 0
        self.links: dict[str, _SessionLink] = {}
        self.dead: set[str] = set()
        self.participants: dict[str, ParticipantId] = {ENVIRONMENT.name: ENVIRONMENT}
        for slot in params.actor_slots:
            kind = ACTOR_CLASSES[slot.class_name].participant_kind
            self.participants[slot.actor_name] = ParticipantId(kind, slot.actor_name)
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.ledger = RewardLedger(params.retro_window)
        self.pending_clients = {s.actor_name for s in params.actor_slots if s.is_client}
        self.clients_ready = asyncio.Event()
        if not self.pending_clients:
            self.clients_ready.set()
        self.terminate_reason: str | None = None
        self.done = asyncio.Event()
        self.end_extra: dict[str, Any] = {}
        self.writer: LogWriter | None = None
        self.task: asyncio.Task | None = None
        self.tick_rewards: list[Reward] = []
        self.tick_messages: list[MessageRecord] = []

    @property
    def trial_id(self) -> str:
        return self.params.trial_id

    def link(self, name: str) -> _SessionLink | None:
        if name in self.dead:
            return None
        link = self.links.get(name)
        if link is not None and link.broken:
            return None
        return link

    def acting_slots(self):
        return [s for s in self.params.actor_slots if ACTOR_CLASSES[s.class_name].acts]


class Orchestrator:
    def __init__(
        self,
        registry: Registry | None = None,
        metrics: MetricsSink | None = None,
        log_dir: str = "logs",
        *,
        clock=time.time,
        join_timeout_ms: int = DEFAULT_JOIN_TIMEOUT_MS,
        local_directory: LocalDirectory | None = None,
    ) -> None:
        self.registry = registry if registry is not None else Registry()
        self.metrics = metrics if metrics is not None else MetricsSink()
        self.log_dir = log_dir
        self.clock = clock
        self.join_timeout_ms = join_timeout_ms
        self.local_directory = local_directory
        self._trials: dict[str, Trial] = {}
        self._watchers: list[Watcher] = []
        self._server: asyncio.AbstractServer | None = None

    # -- lifecycle events ---------------------------------------------------

    def _set_state(self, trial: Trial, state: str, reason: str | None = None,
                   extra: dict[str, Any] | None = None) -> None:
        trial.state = state
        trial.reason = reason
        payload = dict(extra or {})
        if state == "ended":
            trial.end_extra = payload
        for watcher in self._watchers:
            if watcher.matches(trial.trial_id):
                watcher.queue.put_nowait((trial.trial_id, state, reason, payload))

    def subscribe(self, filt: str = "*") -> Watcher:
        """Current state of matching trials first, then every later transition."""
        watcher = Watcher(filt)
        for trial in self._trials.values():
            if watcher.matches(trial.trial_id):
                watcher.queue.put_nowait((trial.trial_id, trial.state, trial.reason, trial.end_extra))
        self._watchers.append(watcher)
        return watcher

    def unsubscribe(self, watcher: Watcher) -> None:
        if watcher in self._watchers:
            self._watchers.remove(watcher)

    def list_trials(self) -> list[Trial]:
        return list(self._trials.values())

    def get_trial(self, trial_id: str) -> Trial | None:
        return self._trials.get(trial_id)

    # -- trial startup ------------------------------------------------------

    async def start_trial(self, params: TrialParams) -> str:
        """Validate, admit, and launch a trial; returns its id immediately."""
        if not params.trial_id:
            params = with_trial_id(params, f"t-{uuid.uuid4().hex[:12]}")
        if params.trial_id in self._trials:
            raise SchemaViolation("trial_id", f"trial {params.trial_id!r} already exists")
        trial = Trial(params)
        self._trials[params.trial_id] = trial
        self._set_state(trial, "pending")
        trial.task = asyncio.get_running_loop().create_task(self._run_trial(trial))
        return params.trial_id

    async def terminate_trial(self, trial_id: str, reason: str = "client_requested") -> None:
        """Request termination and wait for the trial to end."""
        trial = self._trials.get(trial_id)
        if trial is None or trial.state == "ended":
            raise NotFound(trial_id)
        self.request_termination(trial, reason)
        await trial.done.wait()

    def request_termination(self, trial: Trial, reason: str) -> None:
        if trial.terminate_reason is None and trial.state != "ended":
            trial.terminate_reason = reason
            trial.clients_ready.set()
            trial.inbox.put_nowait((_TERMINATE, None))

    async def wait_trial(self, trial_id: str) -> None:
        trial = self._trials.get(trial_id)
        if trial is None:
            raise NotFound(trial_id)
        await trial.done.wait()

    # -- trial execution ----------------------------------------------------

    async def _dial_participant(self, trial: Trial, name: str, endpoint: str,
                                setup_payload: dict[str, Any]) -> Session:
        session = await dial(endpoint, self.local_directory)
        await session.send(Envelope(
            msg_type="start_trial",
            trial_id=trial.trial_id,
            tick_id=0,
            sender=ORCHESTRATOR,
            payload=setup_payload,
        ))
        reply = await asyncio.wait_for(session.recv(), SETUP_TIMEOUT_S)
        if reply is None or reply.msg_type != "join_ack":
            detail = reply.payload if reply is not None else "connection closed"
            await session.close()
            raise _SetupFailed(f"{name}: setup rejected: {detail}")
        return session

    def _pump(self, trial: Trial, name: str, session: Session) -> asyncio.Task:
        async def run() -> None:
            while True:
                envelope = await session.recv()
                await trial.inbox.put((name, envelope))
                if envelope is None:
                    return
        return asyncio.get_running_loop().create_task(run())

    async def _run_trial(self, trial: Trial) -> None:
        pumps: list[asyncio.Task] = []
        try:
            self._set_state(trial, "initializing")
            params = self.registry.pre_trial_hook(trial.params)
            trial.params = params

            actor_list = [
                {"actor_name": s.actor_name, "class_name": s.class_name, "implementation": s.implementation}
                for s in params.actor_slots
            ]
            env_session = await self._dial_participant(trial, ENVIRONMENT.name, params.env_endpoint, {
                "role": "environment",
                "env_config": params.env_config,
                "actors": actor_list,
                "max_tick": params.max_tick,
                "retro_window": params.retro_window,
                "seed": params.seed,
            })
            trial.links[ENVIRONMENT.name] = _SessionLink(env_session)
            pumps.append(self._pump(trial, ENVIRONMENT.name, env_session))

            for slot in params.actor_slots:
                if slot.is_client:
                    continue
                session = await self._dial_participant(trial, slot.actor_name, slot.endpoint, {
                    "role": "actor",
                    "actor_name": slot.actor_name,
                    "class_name": slot.class_name,
                    "implementation": slot.implementation,
                    "env_config": params.env_config,
                    "max_tick": params.max_tick,
                    "retro_window": params.retro_window,
                    "seed": params.seed,
                })
                trial.links[slot.actor_name] = _SessionLink(session)
                pumps.append(self._pump(trial, slot.actor_name, session))
        except (ResolutionError, _SetupFailed, ConnectionError, OSError,
                ProtocolError, asyncio.TimeoutError) as exc:
            log.warning("trial %s setup failed: %s", trial.trial_id, exc)
            await self._close_links(trial, pumps)
            self._set_state(trial, "ended", "setup_failed")
            trial.done.set()
            return

        # Setup succeeded: from here on the trial always produces a log with
        # header and footer, whatever path it takes to "ended".
        try:
            trial.writer = LogWriter(self.log_dir, trial.trial_id)
        except Exception as exc:
            log.error("trial %s: cannot open datalog, continuing degraded: %s", trial.trial_id, exc)
        if trial.writer is not None:
            schema_versions = {
                slot.class_name: {
                    "observation": ACTOR_CLASSES[slot.class_name].observation_schema.to_payload(),
                    "action": (
                        ACTOR_CLASSES[slot.class_name].action_schema.to_payload()
                        if ACTOR_CLASSES[slot.class_name].action_schema else None
                    ),
                }
                for slot in trial.params.actor_slots
            }
            trial.writer.write_header(trial.params.to_payload(), schema_versions, self.clock())

        reason = "env_terminal"
        try:
            if trial.pending_clients:
                self._set_state(trial, "waiting_for_clients")
                try:
                    await asyncio.wait_for(trial.clients_ready.wait(), self.join_timeout_ms / 1000.0)
                except asyncio.TimeoutError:
                    trial.terminate_reason = trial.terminate_reason or "client_join_timeout"
            if trial.terminate_reason is None:
                self._set_state(trial, "running")
                reason = await self._tick_loop(trial)
            reason = trial.terminate_reason or reason
        except _EnvironmentLost:
            reason = "env_disconnected"
        except Exception:
            log.exception("trial %s crashed", trial.trial_id)
            reason = "internal_error"
        finally:
            await self._finish(trial, reason, pumps)

    async def _tick_loop(self, trial: Trial) -> str:
        params = trial.params
        loop = asyncio.get_running_loop()
        first = await self._await_env_payload(trial)
        if trial.terminate_reason is not None:
            if trial.tick_rewards or trial.tick_messages:
                self._flush_partial_tick(trial, 0, {}, {})
            return trial.terminate_reason
        observations = first["observations"]
        started_at = loop.time()

        while True:
            tick = trial.tick
            if params.tick_interval_ms > 0:
                target = started_at + tick * (params.tick_interval_ms / 1000.0)
                delay = target - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)

            self._fan_out_observations(trial, tick, observations)

            actions = await self._collect_actions(trial, tick, observations)
            if trial.terminate_reason is not None:
                self._flush_partial_tick(trial, tick, observations, actions)
                return trial.terminate_reason

            env_link = trial.link(ENVIRONMENT.name)
            if env_link is None:
                raise _EnvironmentLost()
            env_link.send_nowait(Envelope(
                msg_type="action",
                trial_id=trial.trial_id,
                tick_id=tick,
                sender=ORCHESTRATOR,
                payload={"actions": {name: record.action for name, record in actions.items()}},
            ))

            reply = await self._await_env_payload(trial)
            if trial.terminate_reason is not None:
                self._flush_partial_tick(trial, tick, observations, actions)
                return trial.terminate_reason

            sample = TickSample(
                trial_id=trial.trial_id,
                tick_id=tick,
                observations=observations,
                actions=actions,
                rewards_received=tuple(trial.tick_rewards),
                messages=tuple(trial.tick_messages),
            )
            trial.tick_rewards = []
            trial.tick_messages = []
            if trial.writer is not None:
                trial.writer.write_sample(sample)

            trial.tick = tick + 1
            observations = reply["observations"]

            if reply.get("terminal"):
                self._fan_out_observations(trial, trial.tick, observations)
                return "max_tick" if reply.get("terminal_reason") == "max_tick" else "env_terminal"
            if trial.tick >= params.max_tick:
                self._fan_out_observations(trial, trial.tick, observations)
                return "max_tick"

    def _flush_partial_tick(self, trial: Trial, tick: int, observations: dict[str, Any],
                            actions: dict[str, ActionRecord]) -> None:
        """Termination interrupted this tick after its observations went out.
        Rewards and messages consumed meanwhile already took effect (ledger,
        online pushes), so the tick is logged; its actions never reached the
        environment."""
        sample = TickSample(
            trial_id=trial.trial_id,
            tick_id=tick,
            observations=observations,
            actions=actions,
            rewards_received=tuple(trial.tick_rewards),
            messages=tuple(trial.tick_messages),
        )
        trial.tick_rewards = []
        trial.tick_messages = []
        if trial.writer is not None:
            trial.writer.write_sample(sample)
        trial.tick = tick + 1

    def _fan_out_observations(self, trial: Trial, tick: int, observations: dict[str, Any]) -> None:
        """Deliver each actor exactly its own observation."""
        for name, payload in observations.items():
            link = trial.link(name)
            if link is None:
                continue
            link.send_nowait(Envelope(
                msg_type="observation_set",
                trial_id=trial.trial_id,
                tick_id=tick,
                sender=ORCHESTRATOR,
                payload={"observations": {name: payload}},
            ))

    async def _collect_actions(self, trial: Trial, tick: int,
                               observations: dict[str, Any]) -> dict[str, ActionRecord]:
        params = trial.params
        expected = {
            slot.actor_name: ACTOR_CLASSES[slot.class_name]
            for slot in trial.acting_slots()
            if slot.actor_name in observations
        }
        collected: dict[str, dict[str, Any]] = {}
        loop = asyncio.get_running_loop()
        deadline = loop.time() + params.action_timeout_ms / 1000.0
        # Only wait on actors whose sessions are still alive; the rest default.
        while any(
            name not in collected and trial.link(name) is not None
            for name in expected
        ):
            try:
                name, envelope = trial.inbox.get_nowait()
            except asyncio.QueueEmpty:
                remaining = deadline - loop.time()
                if remaining <= 0:
                    break
                try:
                    name, envelope = await asyncio.wait_for(trial.inbox.get(), remaining)
                except asyncio.TimeoutError:
                    break
            if name == _TERMINATE:
                break
            if envelope is not None and envelope.msg_type == "action":
                if name in expected and name not in collected and envelope.tick_id == tick:
                    action = envelope.payload.get("action", envelope.payload)
                    try:
                        validate_against_schema(action, expected[name].action_schema)
                        collected[name] = action
                    except SchemaViolation as exc:
                        self._error_to(trial, name, "schema_violation", str(exc))
                continue  # stale or duplicate actions are dropped
            self._handle_generic(trial, name, envelope)
            if trial.terminate_reason is not None:
                break

        return {
            name: (
                ActionRecord(collected[name], False)
                if name in collected
                else ActionRecord(dict(actor_class.default_action), True)
            )
            for name, actor_class in expected.items()
        }

    async def _await_env_payload(self, trial: Trial) -> dict[str, Any]:
        """Consume the inbox until the environment's next observation_set,
        routing the rewards and messages that arrive in between."""
        while True:
            if trial.terminate_reason is not None:
                return {"observations": {}}
            try:
                name, envelope = trial.inbox.get_nowait()
            except asyncio.QueueEmpty:
                try:
                    name, envelope = await asyncio.wait_for(trial.inbox.get(), ENV_STEP_TIMEOUT_S)
                except asyncio.TimeoutError:
                    raise _EnvironmentLost() from None
            if name == _TERMINATE:
                return {"observations": {}}
            if (
                envelope is not None
                and name == ENVIRONMENT.name
                and envelope.msg_type == "observation_set"
            ):
                return envelope.payload
            self._handle_generic(trial, name, envelope)

    def _handle_generic(self, trial: Trial, name: str, envelope: Envelope | None) -> None:
        if envelope is None:
            trial.dead.add(name)
            if name == ENVIRONMENT.name:
                raise _EnvironmentLost()
            return
        if envelope.msg_type == "reward":
            self.route_reward(trial, name, envelope.payload)
        elif envelope.msg_type == "message":
            self.route_message(trial, name, envelope.payload)
        elif envelope.msg_type == "end_trial":
            self.request_termination(trial, str(envelope.payload.get("reason") or "client_requested"))
        elif envelope.msg_type in ("action", "heartbeat", "error", "join_trial"):
            pass  # stale action between phases, keepalive, or participant complaint
        else:
            self._error_to(trial, name, "unexpected_message", envelope.msg_type)

    # -- routing ------------------------------------------------------------

    def route_reward(self, trial: Trial, sender_name: str, payload: dict[str, Any]) -> None:
        """Record a reward received this tick; push the refreshed aggregate to
        the target actor and keep the raw reward for this tick's log entry.

        The source is the sending session's participant identity, not
        whatever the payload claims.
        """
        source = trial.participants.get(sender_name)
        if source is None:
            return
        try:
            reward = Reward(
                value=float(payload["value"]),
                confidence=float(payload["confidence"]),
                source=source,
                target_actor=str(payload["target_actor"]),
                target_tick=int(payload["target_tick"]),
            )
        except (KeyError, TypeError, ValueError, ProtocolError) as exc:
            self._error_to(trial, sender_name, "invalid_reward", str(exc))
            return
        if reward.target_actor not in trial.participants or reward.target_actor == ENVIRONMENT.name:
            self._error_to(trial, sender_name, "unknown_recipient", reward.target_actor)
            return
        try:
            aggregated = trial.ledger.add(reward, trial.tick)
        except ProtocolError as exc:
            self._error_to(trial, sender_name, "future_target_tick", str(exc))
            return
        except RetroWindowExceeded as exc:
            log.info("trial %s: %s", trial.trial_id, exc)
            self._error_to(trial, sender_name, "retro_window_exceeded", str(exc))
            return
        trial.tick_rewards.append(reward)
        link = trial.link(reward.target_actor)
        if link is not None:
            link.send_nowait(Envelope(
                msg_type="reward",
                trial_id=trial.trial_id,
                tick_id=trial.tick,
                sender=ORCHESTRATOR,
                payload=aggregated.to_payload(),
            ))

    def route_message(self, trial: Trial, sender_name: str, payload: dict[str, Any]) -> None:
        """Deliver a payload verbatim, tagged with sender and tick; ``*``
        as recipient name broadcasts to every participant of that kind."""
        sender = trial.participants.get(sender_name)
        if sender is None:
            return
        to = payload.get("to")
        body = payload.get("body")
        if not isinstance(to, dict) or "kind" not in to or "name" not in to:
            self._error_to(trial, sender_name, "invalid_message", "missing recipient")
            return
        if to["name"] == "*":
            recipients = [
                name for name, pid in trial.participants.items()
                if pid.kind == to["kind"] and name != sender_name
            ]
        else:
            if to["name"] not in trial.participants or trial.participants[to["name"]].kind != to["kind"]:
                self._error_to(trial, sender_name, "unknown_recipient", str(to["name"]))
                return
            recipients = [to["name"]]
        for name in recipients:
            recipient = trial.participants[name]
            trial.tick_messages.append(MessageRecord(sender, recipient, body))
            link = trial.link(name)
            if link is not None:
                link.send_nowait(Envelope(
                    msg_type="message",
                    trial_id=trial.trial_id,
                    tick_id=trial.tick,
                    sender=sender,
                    payload={"to": recipient.to_payload(), "body": body},
                ))

    def _error_to(self, trial: Trial, name: str, code: str, detail: str) -> None:
        link = trial.link(name)
        if link is not None:
            link.send_nowait(Envelope(
                msg_type="error",
                trial_id=trial.trial_id,
                tick_id=trial.tick,
                sender=ORCHESTRATOR,
                payload={"code": code, "detail": detail},
            ))

    # -- trial teardown -----------------------------------------------------

    async def _finish(self, trial: Trial, reason: str, pumps: list[asyncio.Task]) -> None:
        self._set_state(trial, "terminating", reason)
        totals = trial.ledger.totals()
        for slot in trial.acting_slots():
            totals.setdefault(slot.actor_name, 0.0)
        if trial.writer is not None:
            trial.writer.write_footer(reason, trial.ledger.table())
        for slot in trial.acting_slots():
            self.metrics.record_trial_total(slot.implementation, totals[slot.actor_name])

        ended = Envelope(
            msg_type="trial_ended",
            trial_id=trial.trial_id,
            tick_id=trial.tick,
            sender=ORCHESTRATOR,
            payload={"reason": reason, "total_ticks": trial.tick, "totals": totals},
        )
        for name in list(trial.links):
            link = trial.link(name)
            if link is not None:
                link.send_nowait(ended)
        await self._close_links(trial, pumps)
        self._set_state(trial, "ended", reason,
                        extra={"totals": totals, "total_ticks": trial.tick})
        trial.done.set()

    async def _close_links(self, trial: Trial, pumps: list[asyncio.Task]) -> None:
        for link in trial.links.values():
            await link.flush_and_close()
        for pump in pumps:
            pump.cancel()

    # -- inbound connections ------------------------------------------------

    def join_client(self, trial_id: str, actor_name: str, session: Session) -> Trial:
        trial = self._trials.get(trial_id)
        if trial is None:
            raise ProtocolError("unknown_trial")
        slot = trial.params.slot(actor_name)
        if slot is None or not slot.is_client:
            raise ProtocolError("unknown_slot")
        if trial.state not in ("waiting_for_clients", "running"):
            raise ProtocolError("trial_not_joinable")
        if trial.link(actor_name) is not None:
            raise ProtocolError("slot_taken")
        trial.dead.discard(actor_name)
        trial.links[actor_name] = _SessionLink(session)
        trial.pending_clients.discard(actor_name)
        if not trial.pending_clients:
            trial.clients_ready.set()
        return trial

    async def handle_session(self, session: Session) -> None:
        """Serve one inbound connection: a controller, a registering service,
        or a client actor joining a trial."""
        bound: tuple[Trial, str] | None = None
        watcher: Watcher | None = None
        watch_task: asyncio.Task | None = None
        registered: list[tuple[str, str]] = []
        try:
            while True:
                envelope = await session.recv()
                if envelope is None:
                    break
                if bound is not None and envelope.msg_type in ("action", "reward", "message", "end_trial"):
                    await bound[0].inbox.put((bound[1], envelope))
                    continue
                try:
                    out = await self._dispatch_control(session, envelope, registered)
                    bound = out.get("bound", bound)
                    if "watcher" in out:
                        watcher = out["watcher"]
                        watch_task = out["watch_task"]
                except SchemaViolation as exc:
                    await self._send_error(session, "invalid_params", str(exc), path=exc.path)
                except ConflictError as exc:
                    await self._send_error(session, "registration_conflict", str(exc))
                except NotFound:
                    await self._send_error(session, "unknown_trial", envelope.trial_id)
                except ProtocolError as exc:
                    await self._send_error(session, str(exc), "")
                except (KeyError, TypeError, ValueError) as exc:
                    await self._send_error(session, "bad_payload", repr(exc))
        finally:
            if watch_task is not None:
                watch_task.cancel()
            if watcher is not None:
                self.unsubscribe(watcher)
            for impl, endpoint in registered:
                self.registry.drop(impl, endpoint)
            if bound is not None:
                bound[0].dead.add(bound[1])
                await bound[0].inbox.put((bound[1], None))
            await session.close()

    async def _dispatch_control(self, session: Session, envelope: Envelope,
                                registered: list[tuple[str, str]]) -> dict:
        out: dict = {}
        mt = envelope.msg_type
        if mt == "register_service":
            p = envelope.payload
            self.registry.register(str(p["class_name"]), str(p["implementation"]), str(p["endpoint"]))
            registered.append((p["implementation"], p["endpoint"]))
            await session.send(Envelope(
                msg_type="register_ack", trial_id="", tick_id=0, sender=ORCHESTRATOR,
                payload={"liveness_window_ms": int(self.registry.liveness_window_s * 1000)},
            ))
        elif mt == "heartbeat":
            for impl, endpoint in registered:
                self.registry.heartbeat(impl, endpoint)
        elif mt == "start_trial":
            params = params_from_payload(envelope.payload.get("params"))
            trial_id = await self.start_trial(params)
            await session.send(Envelope(
                msg_type="trial_state", trial_id=trial_id, tick_id=0, sender=ORCHESTRATOR,
                payload={"state": "pending", "reason": None},
            ))
        elif mt == "join_trial":
            payload = envelope.payload
            if "watch" in payload:
                filt = str(payload["watch"])
                if filt != "*" and filt not in self._trials:
                    raise NotFound(filt)
                watcher = self.subscribe(filt)
                await session.send(Envelope(
                    msg_type="join_ack", trial_id="", tick_id=0, sender=ORCHESTRATOR,
                    payload={"watch": filt},
                ))
                out["watcher"] = watcher
                out["watch_task"] = asyncio.get_running_loop().create_task(
                    self._stream_watcher(watcher, session))
            else:
                actor_name = str(payload.get("actor_name"))
                trial = self.join_client(envelope.trial_id, actor_name, session)
                out["bound"] = (trial, actor_name)
                slot = trial.params.slot(actor_name)
                actor_class = ACTOR_CLASSES[slot.class_name]
                await session.send(Envelope(
                    msg_type="join_ack", trial_id=trial.trial_id, tick_id=trial.tick,
                    sender=ORCHESTRATOR,
                    payload={
                        "actor_name": actor_name,
                        "class_name": slot.class_name,
                        "observation_schema": actor_class.observation_schema.to_payload(),
                        "action_schema": (
                            actor_class.action_schema.to_payload()
                            if actor_class.action_schema else None
                        ),
                        "params": trial.params.to_payload(),
                    },
                ))
        elif mt == "end_trial":
            trial = self._trials.get(envelope.trial_id)
            if trial is None or trial.state == "ended":
                raise NotFound(envelope.trial_id)
            reason = str(envelope.payload.get("reason") or "client_requested")
            self.request_termination(trial, reason)
            await trial.done.wait()
            await session.send(Envelope(
                msg_type="trial_ended", trial_id=trial.trial_id, tick_id=trial.tick,
                sender=ORCHESTRATOR,
                payload={"reason": trial.reason, **trial.end_extra},
            ))
        elif mt in ("action", "reward", "message"):
            raise ProtocolError("not_joined")
        else:
            raise ProtocolError(f"unexpected_{mt}")
        return out

    async def _send_error(self, session: Session, code: str, detail: str,
                          path: str | None = None) -> None:
        payload: dict[str, Any] = {"code": code, "detail": detail}
        if path is not None:
            payload["path"] = path
        try:
            await session.send(Envelope(
                msg_type="error", trial_id="", tick_id=0, sender=ORCHESTRATOR, payload=payload,
            ))
        except (ConnectionError, OSError):
            pass

    async def _stream_watcher(self, watcher: Watcher, session: Session) -> None:
        try:
            while True:
                trial_id, state, reason, extra = await watcher.queue.get()
                await session.send(Envelope(
                    msg_type="trial_state", trial_id=trial_id, tick_id=0, sender=ORCHESTRATOR,
                    payload={"state": state, "reason": reason, **extra},
                ))
        except (ConnectionError, OSError, asyncio.CancelledError):
            pass

    # -- servers ------------------------------------------------------------

    async def serve_tcp(self, host: str = "127.0.0.1", port: int = DEFAULT_TCP_PORT) -> int:
        async def on_connection(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            await self.handle_session(StreamSession(reader, writer))

        self._server = await asyncio.start_server(on_connection, host, port)
        return self._server.sockets[0].getsockname()[1]

    async def close(self) -> None:
        for trial in list(self._trials.values()):
            if trial.state != "ended":
                self.request_termination(trial, "orchestrator_shutdown")
        for trial in list(self._trials.values()):
            if trial.task is not None:
                try:
                    await asyncio.wait_for(trial.done.wait(), 5.0)
                except asyncio.TimeoutError:
                    trial.task.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
