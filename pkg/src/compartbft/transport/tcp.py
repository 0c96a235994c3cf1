"""Real network transport over asyncio TCP.

Every frame is ``u32 big-endian length | payload``.  The first frame on a
connection is a hello naming the connecting endpoint (``replica:2``,
``client:0``); after that frames are opaque message bytes.  Replicas dial
each other; clients dial replicas and receive replies on the same socket.
"""
from __future__ import annotations

import asyncio
import logging
import struct
from typing import Callable

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024
HELLO = b"HELLO "


def endpoint_name(ep) -> str:
    return f"{ep[0]}:{ep[1]}"


def parse_endpoint(text: str) -> tuple[str, int]:
    role, _, index = text.partition(":")
    if role not in ("replica", "client") or not index.isdigit():
        raise ValueError(f"bad endpoint {text!r}")
    return role, int(index)


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(_LEN.size)
    (size,) = _LEN.unpack(header)
    if size > MAX_FRAME:
        raise ValueError(f"frame of {size} bytes exceeds limit")
    return await reader.readexactly(size)


def write_frame(writer: asyncio.StreamWriter, data: bytes) -> None:
    writer.write(_LEN.pack(len(data)) + data)


class AsyncClock:
    """Millisecond ticks on the running event loop, matching the scheduler API."""

    def __init__(self, loop: asyncio.AbstractEventLoop | None = None):
        self.loop = loop or asyncio.get_event_loop()
        self._start = self.loop.time()

    def time(self) -> int:
        return int((self.loop.time() - self._start) * 1000)

    def call_later(self, delay: int, fn: Callable[[], None]):
        return self.loop.call_later(max(0, delay) / 1000.0, fn)

    def call_at(self, when: int, fn: Callable[[], None]):
        return self.call_later(when - self.time(), fn)


class TcpTransport:
    """One endpoint's view of the network.

    ``addresses`` maps replica index to ``(host, port)``.  ``deliver(src, data)``
    is called for every inbound frame with ``src`` as a ``(role, index)`` tuple.
    """

    def __init__(self, me: tuple[str, int], addresses: dict[int, tuple[str, int]],
                 deliver: Callable[[tuple[str, int], bytes], None]):
        self.me = me
        self.addresses = addresses
        self.deliver = deliver
        self._out: dict[tuple[str, int], asyncio.StreamWriter] = {}
        self._pending: dict[tuple[str, int], list[bytes]] = {}
        self._inbound: dict[tuple[str, int], asyncio.StreamWriter] = {}
        self._server: asyncio.AbstractServer | None = None
        self._tasks: set[asyncio.Task] = set()
        self.frames_in = 0
        self.frames_out = 0

    async def start(self) -> None:
        if self.me[0] == "replica":
            host, port = self.addresses[self.me[1]]
            self._server = await asyncio.start_server(self._accept, host, port)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for writer in list(self._out.values()) + list(self._inbound.values()):
            writer.close()
        for task in list(self._tasks):
            task.cancel()

    # inbound ----------------------------------------------------------------

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            hello = await read_frame(reader)
            if not hello.startswith(HELLO):
                raise ValueError("missing hello")
            peer = parse_endpoint(hello[len(HELLO):].decode())
        except (ValueError, asyncio.IncompleteReadError, UnicodeDecodeError) as exc:
            log.warning("dropping connection: %s", exc)
            writer.close()
            return
        if peer[0] == "client":
            self._inbound[peer] = writer
        await self._read_loop(peer, reader)

    async def _read_loop(self, peer, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                data = await read_frame(reader)
                self.frames_in += 1
                self.deliver(peer, data)
        except (asyncio.IncompleteReadError, ConnectionError, ValueError):
            log.debug("connection from %s closed", endpoint_name(peer))
        finally:
            if peer[0] == "client":
                self._inbound.pop(peer, None)

    # outbound ---------------------------------------------------------------

    def send(self, dest: tuple[str, int], data: bytes) -> None:
        dest = tuple(dest)
        if dest[0] == "client":
            writer = self._inbound.get(dest)
            if writer is not None and not writer.is_closing():
                write_frame(writer, data)
                self.frames_out += 1
            return
        writer = self._out.get(dest)
        if writer is not None and not writer.is_closing():
            write_frame(writer, data)
            self.frames_out += 1
            return
        queue = self._pending.setdefault(dest, [])
        queue.append(data)
        if len(queue) == 1:
            task = asyncio.ensure_future(self._connect(dest))
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)

    async def _connect(self, dest: tuple[str, int]) -> None:
        host, port = self.addresses[dest[1]]
        for attempt in range(50):
            try:
                reader, writer = await asyncio.open_connection(host, port)
                break
            except OSError:
                await asyncio.sleep(min(0.05 * 2 ** attempt, 1.0))
        else:
            log.warning("giving up on %s", endpoint_name(dest))
            self._pending.pop(dest, None)
            return
        write_frame(writer, HELLO + endpoint_name(self.me).encode())
        self._out[dest] = writer
        for data in self._pending.pop(dest, []):
            write_frame(writer, data)
            self.frames_out += 1
        # replies to clients come back on the socket they opened
        task = asyncio.ensure_future(self._read_loop(dest, reader))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
