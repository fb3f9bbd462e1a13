"""Small destination services used by experiments: echo, sink/source, web-page mimic."""

from __future__ import annotations

import struct

from .transport import Protocol

ECHO_PORT = 7
SOURCE_PORT = 19
WEB_PORT = 80


class Echo(Protocol):
    def data_received(self, conn, data):
        conn.send(data)


class Source(Protocol):
    """Streams ``n`` bytes back after receiving an 8-byte big-endian request for n."""

    def __init__(self):
        self.buf = b""

    def data_received(self, conn, data):
        self.buf += data
        while len(self.buf) >= 8:
            (n,) = struct.unpack(">Q", self.buf[:8])
            self.buf = self.buf[8:]
            conn.send(bytes(n))


class WebObject(Protocol):
    """Answers requests framed as ``u32 response_len || u32 pad_len || pad``."""

    def __init__(self):
        self.buf = b""

    def data_received(self, conn, data):
        self.buf += data
        while len(self.buf) >= 8:
            resp, pad = struct.unpack(">II", self.buf[:8])
            if len(self.buf) < 8 + pad:
                break
            self.buf = self.buf[8 + pad :]
            conn.send(bytes(resp))


def web_request(response_len: int, request_len: int) -> bytes:
    pad = max(request_len - 8, 0)
    return struct.pack(">II", response_len, pad) + bytes(pad)


def serve(node, port: int, factory) -> None:
    def accept(conn):
        conn.handler = factory()

    node.listen(port, accept)
