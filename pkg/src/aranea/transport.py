"""Transport-independent plumbing shared by the sim and socket transports.

Nodes talk to a transport object exposing::

    now() -> float
    call_later(delay, fn) -> handle with .cancel()
    listen(port, on_accept)            on_accept(conn) sets conn.handler
    connect(host, port, handler) -> conn
    bind_datagram(port, fn)            fn(data, (host, port))
    sendto(host, port, data, sport)

Connections are byte streams (``send``, ``close``, ``peer``); handlers get
asyncio-style callbacks. Deliveries are chunked arbitrarily, so every
consumer reassembles with one of the readers below.
"""

from __future__ import annotations

import struct
from typing import Any, Callable

from .cells import CELL_SIZE


class Protocol:
    def connection_made(self, conn) -> None:
        pass

    def data_received(self, conn, data: bytes) -> None:
        pass

    def connection_lost(self, conn, reason: str | None) -> None:
        pass


class Deferred:
    """A minimal single-shot result holder with callbacks.

    Works in the single-threaded sim loop and, guarded by the node lock, in
    the socket transport.
    """

    def __init__(self):
        self.done = False
        self.result: Any = None
        self.error: BaseException | None = None
        self._callbacks: list[Callable[[Deferred], None]] = []

    def resolve(self, value: Any = None) -> None:
        if self.done:
            return
        self.done, self.result = True, value
        self._fire()

    def fail(self, error: BaseException) -> None:
        if self.done:
            return
        self.done, self.error = True, error
        self._fire()

    def add_callback(self, fn: Callable[[Deferred], None]) -> Deferred:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)
        return self

    def chain(self, other: Deferred) -> None:
        """Forward this deferred's outcome into ``other``."""
        self.add_callback(lambda d: other.fail(d.error) if d.error else other.resolve(d.result))

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)

    def value(self) -> Any:
        if not self.done:
            raise RuntimeError("deferred not yet resolved")
        if self.error is not None:
            raise self.error
        return self.result


class CellReader:
    """Reassembles 512-byte cells from a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= CELL_SIZE:
            out.append(bytes(self._buf[:CELL_SIZE]))
            del self._buf[:CELL_SIZE]
        return out


_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 24


def frame(body: bytes) -> bytes:
    return _LEN.pack(len(body)) + body


class FrameReader:
    """Reassembles u32-length-prefixed frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            (n,) = _LEN.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise ValueError(f"frame too large: {n}")
            if len(self._buf) < 4 + n:
                break
            out.append(bytes(self._buf[4 : 4 + n]))
            del self._buf[: 4 + n]
        return out


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)
