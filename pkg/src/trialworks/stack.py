"""One-process deployments: orchestrator, arena, and agent services together.

``start_local_stack`` wires the services through in-process sessions (stable
``local:`` endpoints, no sockets) — the fast path for tests and reproducible
campaigns.  ``start_tcp_stack`` runs everything behind real listeners with
wire registration.  ``python -m trialworks.stack`` serves a full deployment:
envelope TCP port, HTTP/browser-socket port, arena and agents.
"""

from __future__ import annotations

import asyncio
import os
import time
from dataclasses import dataclass, field

from .agents import PolicyModel
from .metrics import MetricsSink
from .orchestrator import DEFAULT_JOIN_TIMEOUT_MS, Orchestrator
from .registry import ENVIRONMENT_CLASS, Registry
from .services import (
    AGENT_IMPLEMENTATIONS,
    ARENA_IMPLEMENTATION,
    AgentService,
    ArenaService,
    ServiceRunner,
    agent_runner,
    arena_runner,
)
from .sessions import LocalDirectory


@dataclass
class Stack:
    orchestrator: Orchestrator
    agent_service: AgentService | None = None
    tcp_port: int | None = None
    runners: list[ServiceRunner] = field(default_factory=list)

    @property
    def tcp_endpoint(self) -> str:
        assert self.tcp_port is not None
        return f"tcp:127.0.0.1:{self.tcp_port}"

    async def close(self) -> None:
        for runner in self.runners:
            await runner.close()
        await self.orchestrator.close()


async def start_local_stack(
    log_dir: str,
    *,
    clock=time.time,
    metrics: MetricsSink | None = None,
    agent_model: PolicyModel | None = None,
    join_timeout_ms: int = DEFAULT_JOIN_TIMEOUT_MS,
    serve_tcp: bool = False,
) -> Stack:
    """All services in-process behind stable ``local:`` endpoints."""
    directory = LocalDirectory()
    arena_service = ArenaService()
    agent_service = AgentService(model=agent_model)
    arena_endpoint = directory.add("arena", arena_service.handle_session)
    agents_endpoint = directory.add("agents", agent_service.handle_session)

    registry = Registry(liveness_window_s=3600.0)
    registry.register(ENVIRONMENT_CLASS, ARENA_IMPLEMENTATION, arena_endpoint)
    for implementation in AGENT_IMPLEMENTATIONS:
        registry.register("player", implementation, agents_endpoint)

    orchestrator = Orchestrator(
        registry,
        metrics if metrics is not None else MetricsSink(),
        log_dir,
        clock=clock,
        join_timeout_ms=join_timeout_ms,
        local_directory=directory,
    )
    stack = Stack(orchestrator=orchestrator, agent_service=agent_service)
    if serve_tcp:
        stack.tcp_port = await orchestrator.serve_tcp(port=0)
    return stack


async def start_tcp_stack(
    log_dir: str,
    *,
    clock=time.time,
    metrics: MetricsSink | None = None,
    agent_model: PolicyModel | None = None,
    join_timeout_ms: int = DEFAULT_JOIN_TIMEOUT_MS,
    host: str = "127.0.0.1",
    port: int = 0,
) -> Stack:
    """Everything behind real stream listeners, registered over the wire."""
    orchestrator = Orchestrator(
        metrics=metrics if metrics is not None else MetricsSink(),
        log_dir=log_dir,
        clock=clock,
        join_timeout_ms=join_timeout_ms,
    )
    tcp_port = await orchestrator.serve_tcp(host, port)
    orchestrator_endpoint = f"tcp:{host}:{tcp_port}"

    arena = arena_runner()
    await arena.serve(host)
    await arena.register(orchestrator_endpoint)

    agent_service = AgentService(model=agent_model)
    agents = ServiceRunner(agent_service.handle_session,
                           [("player", impl) for impl in agent_service.implementations])
    await agents.serve(host)
    await agents.register(orchestrator_endpoint)

    return Stack(
        orchestrator=orchestrator,
        agent_service=agent_service,
        tcp_port=tcp_port,
        runners=[arena, agents],
    )


async def _serve_forever() -> None:
    import uvicorn

    from .api import create_app

    tcp_port = int(os.environ.get("TW_PORT", "9000"))
    ws_port = int(os.environ.get("TW_WS_PORT", "9001"))
    log_dir = os.environ.get("TW_LOG_DIR", "logs")
    join_timeout_ms = int(os.environ.get("TW_JOIN_TIMEOUT_MS", str(DEFAULT_JOIN_TIMEOUT_MS)))

    stack = await start_tcp_stack(log_dir, join_timeout_ms=join_timeout_ms, port=tcp_port)
    app = create_app(stack.orchestrator)
    config = uvicorn.Config(app, host="127.0.0.1", port=ws_port, log_level="info")
    server = uvicorn.Server(config)
    print(f"trialworks stack: envelope port {tcp_port}, http/browser port {ws_port}, logs in {log_dir}")
    try:
        await server.serve()
    finally:
        await stack.close()


if __name__ == "__main__":
    asyncio.run(_serve_forever())
