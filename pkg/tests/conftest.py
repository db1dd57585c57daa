"""Shared helpers: local stacks, scripted services, and client drivers."""

from __future__ import annotations

import asyncio
from typing import Any, Awaitable, Callable

import pytest

from trialworks.orchestrator import Orchestrator
from trialworks.protocol import ActorSlot, Envelope, ParticipantId, TrialParams
from trialworks.sessions import LocalSession, Session
from trialworks.stack import Stack, start_local_stack

# Standard duel arena for integration tests: full-arena vision, fast balls,
# so heuristic duels resolve in a few dozen ticks.
DUEL_ENV = {"arena_size": 60.0, "teams": [1, 1], "fov_range": 90.0, "shot_velocity": 4.0}


def duel_params(trial_id="", seed=0, impl_1="heuristic_v1", impl_2="random_v1",
                max_tick=300, env=None, **overrides) -> TrialParams:
    return TrialParams(
        trial_id=trial_id,
        env_implementation="quack_arena_v1",
        env_config=dict(env or DUEL_ENV),
        actor_slots=(
            ActorSlot("player_1", "player", impl_1),
            ActorSlot("player_2", "player", impl_2),
        ),
        max_tick=max_tick,
        seed=seed,
        **overrides,
    )


def scripted_agent(act_fn: Callable[[dict, int], dict]):
    """A local service handler acting via ``act_fn(observation, tick)``."""

    async def handle(session: Session) -> None:
        try:
            setup = await session.recv()
            if setup is None or setup.msg_type != "start_trial":
                return
            name = setup.payload["actor_name"]
            me = ParticipantId("actor", name)
            await session.send(Envelope(
                msg_type="join_ack", trial_id=setup.trial_id, tick_id=0, sender=me, payload={}))
            while True:
                envelope = await session.recv()
                if envelope is None or envelope.msg_type == "trial_ended":
                    return
                if envelope.msg_type == "observation_set":
                    obs = envelope.payload["observations"][name]
                    await session.send(Envelope(
                        msg_type="action", trial_id=setup.trial_id, tick_id=envelope.tick_id,
                        sender=me, payload=act_fn(obs, envelope.tick_id)))
        finally:
            await session.close()

    return handle


def silent_agent():
    """Acknowledges setup, then never acts."""

    async def handle(session: Session) -> None:
        setup = await session.recv()
        if setup is None:
            return
        name = setup.payload.get("actor_name", "x")
        await session.send(Envelope(
            msg_type="join_ack", trial_id=setup.trial_id, tick_id=0,
            sender=ParticipantId("actor", name), payload={}))
        while await session.recv() is not None:
            pass

    return handle


ZERO_ACTION = {"fire": False, "strafe": 0.0, "forward": 0.0, "rotate": 0.0}
AIMBOT_ACTION = {"fire": True, "strafe": 0.0, "forward": 0.0, "rotate": 0.0}


def add_scripted_implementation(stack: Stack, implementation: str,
                                act_fn: Callable[[dict, int], dict]) -> None:
    name = f"scripted-{implementation}"
    endpoint = stack.orchestrator.local_directory.add(name, scripted_agent(act_fn))
    stack.orchestrator.registry.register("player", implementation, endpoint)


class ClientDriver:
    """A headless client actor: dials the orchestrator in-process and speaks
    the same envelopes a browser client would."""

    def __init__(self, orchestrator: Orchestrator, kind: str, name: str) -> None:
        self.orchestrator = orchestrator
        self.me = ParticipantId(kind, name)
        self.session, server_side = LocalSession.pair()
        self.task = asyncio.get_event_loop().create_task(
            orchestrator.handle_session(server_side))
        self.inbox: list[Envelope] = []

    async def send(self, msg_type: str, trial_id: str = "", tick_id: int = 0,
                   payload: dict | None = None) -> None:
        await self.session.send(Envelope(
            msg_type=msg_type, trial_id=trial_id, tick_id=tick_id,
            sender=self.me, payload=payload or {}))

    async def recv(self, timeout: float = 5.0) -> Envelope | None:
        return await asyncio.wait_for(self.session.recv(), timeout)

    async def expect(self, msg_type: str, timeout: float = 5.0) -> Envelope:
        """Next envelope of the given type; everything else is kept in order."""
        deadline = asyncio.get_event_loop().time() + timeout
        while True:
            envelope = await self.recv(max(0.01, deadline - asyncio.get_event_loop().time()))
            if envelope is None:
                raise AssertionError(f"connection closed while waiting for {msg_type}")
            if envelope.msg_type == msg_type:
                return envelope
            self.inbox.append(envelope)

    async def join(self, trial_id: str, actor_name: str) -> Envelope:
        await self.send("join_trial", trial_id=trial_id, payload={"actor_name": actor_name})
        return await self.recv()

    async def close(self) -> None:
        await self.session.close()
        try:
            await asyncio.wait_for(self.task, 2.0)
        except (asyncio.TimeoutError, asyncio.CancelledError):
            self.task.cancel()


async def run_trial_to_end(stack: Stack, params: TrialParams) -> str:
    trial_id = await stack.orchestrator.start_trial(params)
    await stack.orchestrator.wait_trial(trial_id)
    return trial_id


async def wait_for_state(stack: Stack, trial_id: str, state: str, timeout: float = 5.0) -> None:
    deadline = asyncio.get_event_loop().time() + timeout
    while True:
        trial = stack.orchestrator.get_trial(trial_id)
        if trial.state == state:
            return
        if trial.state == "ended":
            raise AssertionError(f"trial ended ({trial.reason}) while waiting for {state!r}")
        if asyncio.get_event_loop().time() > deadline:
            raise AssertionError(f"timed out waiting for {state!r}, at {trial.state!r}")
        await asyncio.sleep(0.005)


def run(coro: Awaitable[Any]) -> Any:
    return asyncio.run(coro)


@pytest.fixture
def local_stack_factory(tmp_path):
    """Factory for short-lived local stacks; each call gets its own log dir."""
    counter = {"n": 0}

    def make(**kwargs):
        counter["n"] += 1
        log_dir = tmp_path / f"logs{counter['n']}"
        kwargs.setdefault("clock", lambda: 0.0)
        return start_local_stack(str(log_dir), **kwargs), log_dir

    return make
