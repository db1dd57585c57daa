"""HTTP and browser-socket front of the orchestrator.

Serves the REST control surface (pydantic request/response models), the
read-only plain-text metrics table, and the ``/ws`` endpoint where browser
clients speak the same envelope JSON, one envelope per socket text frame.
"""

from __future__ import annotations

import os
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, Query, WebSocket, WebSocketDisconnect
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .orchestrator import DEFAULT_JOIN_TIMEOUT_MS, NotFound, Orchestrator
from .protocol import (
    Envelope,
    ORCHESTRATOR,
    ProtocolError,
    SchemaViolation,
    decode_envelope_text,
    encode_envelope_text,
    params_from_payload,
)
from .sessions import Session


class ActorSlotModel(BaseModel):
    actor_name: str
    class_name: str
    implementation: str
    endpoint: str | None = None
    is_client: bool = False


class TrialParamsModel(BaseModel):
    trial_id: str = ""
    env_implementation: str
    env_config: dict[str, Any] = Field(default_factory=dict)
    actor_slots: list[ActorSlotModel]
    max_tick: int
    retro_window: int = 32
    action_timeout_ms: int = 1000
    tick_interval_ms: int = 0
    seed: int = 0


class TrialStateModel(BaseModel):
    trial_id: str
    state: str
    reason: str | None = None
    tick: int = 0
    totals: dict[str, float] = Field(default_factory=dict)


class StartTrialResponse(BaseModel):
    trial_id: str


class WsSession(Session):
    """The identical envelope text over a browser socket; the transport's
    own frames bound the messages, so there is no length prefix."""

    def __init__(self, websocket: WebSocket) -> None:
        self._ws = websocket

    async def send(self, envelope: Envelope) -> None:
        try:
            await self._ws.send_text(encode_envelope_text(envelope))
        except (WebSocketDisconnect, RuntimeError) as exc:
            raise ConnectionError(str(exc)) from exc

    async def recv(self) -> Envelope | None:
        while True:
            try:
                text = await self._ws.receive_text()
            except (WebSocketDisconnect, RuntimeError):
                return None
            try:
                return decode_envelope_text(text)
            except ProtocolError as exc:
                try:
                    await self._ws.send_text(encode_envelope_text(Envelope(
                        msg_type="error", trial_id="", tick_id=0, sender=ORCHESTRATOR,
                        payload={"code": "malformed_envelope", "detail": str(exc)},
                    )))
                except (WebSocketDisconnect, RuntimeError):
                    return None

    async def close(self) -> None:
        try:
            await self._ws.close()
        except (WebSocketDisconnect, RuntimeError):
            pass


def _trial_state_model(trial) -> TrialStateModel:
    return TrialStateModel(
        trial_id=trial.trial_id,
        state=trial.state,
        reason=trial.reason,
        tick=trial.tick,
        totals=trial.end_extra.get("totals", {}),
    )


def create_app(orchestrator: Orchestrator | None = None) -> FastAPI:
    """Wrap an orchestrator; with none given, one is built from TW_* env
    vars at startup and its envelope TCP listener is opened on TW_PORT."""
    owns_orchestrator = orchestrator is None
    holder: dict[str, Orchestrator] = {}
    if orchestrator is not None:
        holder["orch"] = orchestrator

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if owns_orchestrator:
            orch = Orchestrator(
                log_dir=os.environ.get("TW_LOG_DIR", "logs"),
                join_timeout_ms=int(os.environ.get("TW_JOIN_TIMEOUT_MS",
                                                   str(DEFAULT_JOIN_TIMEOUT_MS))),
            )
            await orch.serve_tcp(port=int(os.environ.get("TW_PORT", "9000")))
            holder["orch"] = orch
        yield
        if owns_orchestrator:
            await holder["orch"].close()

    app = FastAPI(title="trialworks", lifespan=lifespan)

    def orch() -> Orchestrator:
        return holder["orch"]

    @app.post("/trials", response_model=StartTrialResponse)
    async def start_trial(params: TrialParamsModel) -> StartTrialResponse:
        try:
            parsed = params_from_payload(params.model_dump())
            trial_id = await orch().start_trial(parsed)
        except SchemaViolation as exc:
            raise HTTPException(status_code=422, detail={"path": exc.path, "error": exc.detail})
        return StartTrialResponse(trial_id=trial_id)

    @app.get("/trials", response_model=list[TrialStateModel])
    async def list_trials() -> list[TrialStateModel]:
        return [_trial_state_model(t) for t in orch().list_trials()]

    @app.get("/trials/{trial_id}", response_model=TrialStateModel)
    async def get_trial(trial_id: str) -> TrialStateModel:
        trial = orch().get_trial(trial_id)
        if trial is None:
            raise HTTPException(status_code=404, detail="unknown trial")
        return _trial_state_model(trial)

    @app.delete("/trials/{trial_id}", response_model=TrialStateModel)
    async def terminate_trial(trial_id: str) -> TrialStateModel:
        try:
            await orch().terminate_trial(trial_id)
        except NotFound:
            raise HTTPException(status_code=404, detail="unknown trial")
        return _trial_state_model(orch().get_trial(trial_id))

    @app.get("/metrics", response_class=PlainTextResponse)
    async def metrics(threshold: float | None = Query(default=None)) -> str:
        return orch().metrics.render_table(threshold)

    @app.websocket("/ws")
    async def websocket_endpoint(websocket: WebSocket) -> None:
        await websocket.accept()
        await orch().handle_session(WsSession(websocket))

    frontend_dir = Path(os.environ.get("TW_FRONTEND_DIR", "frontend/dist"))
    if frontend_dir.is_dir():
        app.mount("/app", StaticFiles(directory=str(frontend_dir), html=True), name="webclient")

    return app


app = create_app()
