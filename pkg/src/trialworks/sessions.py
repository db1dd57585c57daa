"""Duplex envelope sessions over stream sockets, in-process queues, or
browser sockets, plus endpoint dialing.

Endpoints take the form ``tcp:host:port`` (or bare ``host:port``) for stream
sockets and ``local:<name>`` for in-process services looked up in a
:class:`LocalDirectory` — the same session protocol either way, so the
orchestrator does not care how a service is hosted.
"""

from __future__ import annotations

import asyncio
from typing import Awaitable, Callable

from .protocol import Envelope, NeedMoreBytes, ProtocolError, decode_frame, encode_frame

_READ_CHUNK = 65536


class Session:
    """One bidirectional envelope stream; ``recv`` returns None on EOF."""

    async def send(self, envelope: Envelope) -> None:
        raise NotImplementedError

    async def recv(self) -> Envelope | None:
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError


class StreamSession(Session):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._reader = reader
        self._writer = writer
        self._buffer = bytearray()

    async def send(self, envelope: Envelope) -> None:
        self._writer.write(encode_frame(envelope))
        await self._writer.drain()

    async def recv(self) -> Envelope | None:
        while True:
            try:
                envelope, consumed = decode_frame(self._buffer)
            except NeedMoreBytes:
                chunk = await self._reader.read(_READ_CHUNK)
                if not chunk:
                    return None
                self._buffer.extend(chunk)
                continue
            del self._buffer[:consumed]
            return envelope

    async def close(self) -> None:
        try:
            self._writer.close()
            await self._writer.wait_closed()
        except (OSError, asyncio.CancelledError):
            pass


class _Closed:
    pass


_CLOSED = _Closed()


class LocalSession(Session):
    """In-process session: a pair of queues carrying envelope values."""

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @classmethod
    def pair(cls) -> tuple["LocalSession", "LocalSession"]:
        a: asyncio.Queue = asyncio.Queue()
        b: asyncio.Queue = asyncio.Queue()
        return cls(a, b), cls(b, a)

    async def send(self, envelope: Envelope) -> None:
        if self._closed:
            raise ConnectionError("session closed")
        await self._outbox.put(envelope)

    async def recv(self) -> Envelope | None:
        if self._closed:
            return None
        item = await self._inbox.get()
        if item is _CLOSED:
            self._closed = True
            return None
        return item

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            await self._outbox.put(_CLOSED)


class LocalDirectory:
    """Named in-process services reachable through ``local:<name>`` endpoints."""

    def __init__(self) -> None:
        self._handlers: dict[str, Callable[[Session], Awaitable[None]]] = {}

    def add(self, name: str, handler: Callable[[Session], Awaitable[None]]) -> str:
        self._handlers[name] = handler
        return f"local:{name}"

    def handler(self, name: str) -> Callable[[Session], Awaitable[None]]:
        if name not in self._handlers:
            raise ConnectionError(f"no local service {name!r}")
        return self._handlers[name]


async def dial(endpoint: str, local_directory: LocalDirectory | None = None) -> Session:
    """Open a session to a service endpoint."""
    if endpoint.startswith("local:"):
        if local_directory is None:
            raise ConnectionError(f"no local directory to resolve {endpoint!r}")
        handler = local_directory.handler(endpoint[len("local:"):])
        client_side, server_side = LocalSession.pair()
        asyncio.get_running_loop().create_task(handler(server_side))
        return client_side
    spec = endpoint[len("tcp:"):] if endpoint.startswith("tcp:") else endpoint
    host, _, port = spec.rpartition(":")
    if not host or not port.isdigit():
        raise ProtocolError(f"invalid endpoint {endpoint!r}")
    reader, writer = await asyncio.open_connection(host, int(port))
    return StreamSession(reader, writer)
