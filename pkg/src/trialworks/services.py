"""Environment and actor services.

A service accepts one session per trial participant: the orchestrator dials
in, sends a ``start_trial`` assignment, and the service answers ``join_ack``
and then speaks the per-tick protocol for its role.  Services register their
implementations with the orchestrator's registry and keep the records fresh
with heartbeats.
"""

from __future__ import annotations

import asyncio
import logging
import random
from typing import Any

from . import arena
from .agents import (
    EpisodeStep,
    PolicyModel,
    heuristic_act,
    random_act,
    reinforce_act,
    reinforce_update,
)
from .protocol import Envelope, ParticipantId, derive_seed
from .registry import ENVIRONMENT_CLASS
from .sessions import Session, StreamSession, dial

log = logging.getLogger(__name__)

ARENA_IMPLEMENTATION = "quack_arena_v1"
AGENT_IMPLEMENTATIONS = ("random_v1", "heuristic_v1", "reinforce_v1")


def _ack(trial_id: str, name: str) -> Envelope:
    return Envelope(
        msg_type="join_ack", trial_id=trial_id, tick_id=0,
        sender=ParticipantId("actor", name), payload={"trial_id": trial_id},
    )


def _refuse(trial_id: str, name: str, detail: str) -> Envelope:
    return Envelope(
        msg_type="error", trial_id=trial_id, tick_id=0,
        sender=ParticipantId("actor", name), payload={"code": "setup_rejected", "detail": detail},
    )


class ArenaService:
    """Hosts any number of concurrent arena instances, one per trial session."""

    implementation = ARENA_IMPLEMENTATION

    async def handle_session(self, session: Session) -> None:
        try:
            setup = await session.recv()
            if setup is None or setup.msg_type != "start_trial":
                return
            payload = setup.payload
            trial_id = setup.trial_id
            try:
                config = arena.ArenaConfig.from_env_config(
                    payload.get("env_config", {}),
                    seed=payload["seed"],
                    max_tick=payload["max_tick"],
                )
                actors = payload["actors"]
                player_names = [a["actor_name"] for a in actors if a["class_name"] == "player"]
                observer_names = [a["actor_name"] for a in actors if a["class_name"] == "observer"]
                state = arena.arena_init(config, player_names)
            except (KeyError, TypeError, ValueError, arena.InitError) as exc:
                await session.send(_refuse(trial_id, "env", str(exc)))
                return
            await session.send(_ack(trial_id, "env"))
            me = ParticipantId("environment", "env")

            def observation_payload() -> dict[str, Any]:
                obs: dict[str, Any] = arena.observations(state)
                if observer_names:
                    world = arena.world_observation(state)
                    for name in observer_names:
                        obs[name] = world
                return obs

            await session.send(Envelope(
                msg_type="observation_set", trial_id=trial_id, tick_id=0, sender=me,
                payload={"observations": observation_payload()},
            ))

            while True:
                envelope = await session.recv()
                if envelope is None or envelope.msg_type == "trial_ended":
                    return
                if envelope.msg_type != "action":
                    continue
                result = arena.arena_step(state, envelope.payload["actions"])
                for reward in result.rewards:
                    await session.send(Envelope(
                        msg_type="reward", trial_id=trial_id, tick_id=envelope.tick_id,
                        sender=me, payload=reward.to_payload(),
                    ))
                obs = observation_payload()
                await session.send(Envelope(
                    msg_type="observation_set", trial_id=trial_id, tick_id=state.tick, sender=me,
                    payload={
                        "observations": obs,
                        "terminal": result.terminal,
                        "terminal_reason": result.terminal_reason,
                    },
                ))
        except (ConnectionError, OSError):
            pass
        finally:
            await session.close()


class _RandomBehavior:
    def __init__(self, seed: int, actor_name: str, env_config: dict[str, Any]) -> None:
        self.rng = random.Random(derive_seed(seed, actor_name))

    def act(self, observation: dict[str, Any], tick: int) -> dict[str, Any]:
        return random_act(observation, self.rng)

    def on_trial_end(self, rewards_by_tick: dict[int, float]) -> None:
        pass


class _HeuristicBehavior:
    def __init__(self, seed: int, actor_name: str, env_config: dict[str, Any]) -> None:
        size = float(env_config.get("arena_size", 100.0))
        self.fov_range = float(env_config.get("fov_range", size / 2.0))

    def act(self, observation: dict[str, Any], tick: int) -> dict[str, Any]:
        return heuristic_act(observation, self.fov_range)

    def on_trial_end(self, rewards_by_tick: dict[int, float]) -> None:
        pass


class _ReinforceBehavior:
    """Acts from the shared policy; learns from its own completed episode."""

    def __init__(self, model: PolicyModel, seed: int, actor_name: str) -> None:
        self.model = model
        self.rng = random.Random(derive_seed(seed, actor_name))
        self.steps: list[tuple[int, Any, int, float]] = []  # (tick, features, cell, log_prob)

    def act(self, observation: dict[str, Any], tick: int) -> dict[str, Any]:
        action, log_prob, cell, features = reinforce_act(self.model, observation, self.rng)
        self.steps.append((tick, features, cell, log_prob))
        return action

    def on_trial_end(self, rewards_by_tick: dict[int, float]) -> None:
        episode = [
            EpisodeStep(features, cell, log_prob, rewards_by_tick.get(tick, 0.0))
            for tick, features, cell, log_prob in self.steps
        ]
        reinforce_update(self.model, episode)


class AgentService:
    """Hosts the player implementations; one session serves one actor slot in
    one trial.  The REINFORCE model is shared across that implementation's
    sessions and updated between trials."""

    def __init__(self, implementations: tuple[str, ...] = AGENT_IMPLEMENTATIONS,
                 model: PolicyModel | None = None) -> None:
        self.implementations = implementations
        self.model = model if model is not None else PolicyModel()

    def _behavior(self, implementation: str, setup: dict[str, Any]):
        seed = setup["seed"]
        actor_name = setup["actor_name"]
        env_config = setup.get("env_config", {})
        if implementation == "random_v1":
            return _RandomBehavior(seed, actor_name, env_config)
        if implementation == "heuristic_v1":
            return _HeuristicBehavior(seed, actor_name, env_config)
        if implementation == "reinforce_v1":
            size = float(env_config.get("arena_size", 100.0))
            self.model.fov_range = float(env_config.get("fov_range", size / 2.0))
            return _ReinforceBehavior(self.model, seed, actor_name)
        return None

    async def handle_session(self, session: Session) -> None:
        try:
            setup = await session.recv()
            if setup is None or setup.msg_type != "start_trial":
                return
            payload = setup.payload
            trial_id = setup.trial_id
            actor_name = payload.get("actor_name", "actor")
            behavior = self._behavior(payload.get("implementation"), payload)
            if behavior is None:
                await session.send(_refuse(trial_id, actor_name,
                                           f"implementation {payload.get('implementation')!r} not served"))
                return
            await session.send(_ack(trial_id, actor_name))
            me = ParticipantId("actor", actor_name)

            rewards_by_tick: dict[int, float] = {}
            while True:
                envelope = await session.recv()
                if envelope is None:
                    return
                if envelope.msg_type == "observation_set":
                    observation = envelope.payload["observations"][actor_name]
                    action = behavior.act(observation, envelope.tick_id)
                    await session.send(Envelope(
                        msg_type="action", trial_id=trial_id, tick_id=envelope.tick_id,
                        sender=me, payload=action,
                    ))
                elif envelope.msg_type == "reward":
                    # Aggregated value for one of this actor's ticks; later
                    # (retroactive) updates overwrite earlier ones.
                    rewards_by_tick[envelope.payload["target_tick"]] = envelope.payload["value"]
                elif envelope.msg_type == "trial_ended":
                    behavior.on_trial_end(rewards_by_tick)
                    return
        except (ConnectionError, OSError):
            pass
        finally:
            await session.close()


class ServiceRunner:
    """Runs a service's session handler behind a TCP listener and keeps its
    registrations alive with the orchestrator."""

    def __init__(self, handler, registrations: list[tuple[str, str]]) -> None:
        self._handler = handler
        self.registrations = registrations  # (class_name, implementation)
        self._server: asyncio.AbstractServer | None = None
        self._heartbeat_task: asyncio.Task | None = None
        self._control: Session | None = None
        self.endpoint: str | None = None

    async def serve(self, host: str = "127.0.0.1", port: int = 0) -> str:
        async def on_connection(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            await self._handler(StreamSession(reader, writer))

        self._server = await asyncio.start_server(on_connection, host, port)
        actual = self._server.sockets[0].getsockname()[1]
        self.endpoint = f"tcp:{host}:{actual}"
        return self.endpoint

    async def register(self, orchestrator_endpoint: str) -> None:
        """Register every implementation and start the heartbeat loop."""
        assert self.endpoint is not None, "serve() first"
        control = await dial(orchestrator_endpoint)
        self._control = control
        window_ms = 10_000
        for class_name, implementation in self.registrations:
            await control.send(Envelope(
                msg_type="register_service", trial_id="", tick_id=0,
                sender=ParticipantId("actor", implementation),
                payload={
                    "class_name": class_name,
                    "implementation": implementation,
                    "endpoint": self.endpoint,
                },
            ))
            ack = await control.recv()
            if ack is None or ack.msg_type != "register_ack":
                raise ConnectionError(f"registration refused: {ack}")
            window_ms = ack.payload.get("liveness_window_ms", window_ms)

        async def heartbeats() -> None:
            sender = ParticipantId("actor", self.registrations[0][1])
            while True:
                await asyncio.sleep(window_ms / 3000.0)
                try:
                    await control.send(Envelope(
                        msg_type="heartbeat", trial_id="", tick_id=0, sender=sender, payload={},
                    ))
                except (ConnectionError, OSError):
                    return

        self._heartbeat_task = asyncio.get_running_loop().create_task(heartbeats())

    async def close(self) -> None:
        if self._heartbeat_task is not None:
            self._heartbeat_task.cancel()
        if self._control is not None:
            await self._control.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


def arena_runner() -> ServiceRunner:
    service = ArenaService()
    return ServiceRunner(service.handle_session, [(ENVIRONMENT_CLASS, service.implementation)])


def agent_runner(implementations: tuple[str, ...] = AGENT_IMPLEMENTATIONS,
                 model: PolicyModel | None = None) -> ServiceRunner:
    service = AgentService(implementations, model=model)
    return ServiceRunner(service.handle_session, [("player", impl) for impl in service.implementations])
