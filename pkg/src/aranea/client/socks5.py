"""SOCKS5 front door (no-auth, CONNECT only) mapping each request onto a circuit stream."""

from __future__ import annotations

import ipaddress
import logging
import struct

from ..cells import EndReason
from ..transport import Deferred, Protocol
from .node import OnionClient, PathSelectionError, ResolveError, StreamError

log = logging.getLogger(__name__)

VERSION = 5
NO_AUTH = 0x00
NO_ACCEPTABLE = 0xFF
CMD_CONNECT, CMD_BIND, CMD_UDP = 1, 2, 3
ATYP_IPV4, ATYP_DOMAIN, ATYP_IPV6 = 1, 3, 4

REP_OK = 0x00
REP_GENERAL = 0x01
REP_NOT_ALLOWED = 0x02
REP_NET_UNREACHABLE = 0x03
REP_HOST_UNREACHABLE = 0x04
REP_REFUSED = 0x05
REP_TTL = 0x06
REP_CMD_UNSUPPORTED = 0x07
REP_ATYP_UNSUPPORTED = 0x08


def reply(code: int, bind: tuple[str, int] = ("0.0.0.0", 0)) -> bytes:
    return bytes([VERSION, code, 0, ATYP_IPV4]) + ipaddress.IPv4Address(bind[0]).packed + struct.pack(">H", bind[1])


def reply_code(error: BaseException) -> int:
    """Map a circuit or stream failure onto a SOCKS5 reply code."""
    if isinstance(error, PathSelectionError):
        return REP_GENERAL
    if isinstance(error, StreamError):
        return {
            EndReason.CONNECT_REFUSED: REP_REFUSED,
            EndReason.NO_ROUTE: REP_HOST_UNREACHABLE,
            EndReason.RESOLVE_FAILED: REP_HOST_UNREACHABLE,
            EndReason.EXIT_POLICY: REP_NOT_ALLOWED,
            EndReason.TIMEOUT: REP_TTL,
        }.get(error.reason, REP_GENERAL)
    if isinstance(error, ResolveError):
        return REP_HOST_UNREACHABLE
    return REP_GENERAL


class Socks5Session(Protocol):
    def __init__(self, client: OnionClient):
        self.client = client
        self.buf = bytearray()
        self.stage = "greeting"
        self.stream = None
        self.conn = None
        self.target: tuple[str, int] | None = None

    def connection_made(self, conn):
        self.conn = conn

    def data_received(self, conn, data):
        if self.stage == "piping":
            self.stream.send(data)
            return
        if self.stage in ("connecting", "done"):
            self.buf += data
            return
        self.buf += data
        if self.stage == "greeting":
            self._greeting(conn)
        if self.stage == "request":
            self._request(conn)

    def _fail(self, conn, payload: bytes):
        self.stage = "done"
        conn.send(payload)
        conn.close()

    def _greeting(self, conn):
        if len(self.buf) < 2:
            return
        ver, n = self.buf[0], self.buf[1]
        if ver != VERSION:
            self._fail(conn, bytes([VERSION, NO_ACCEPTABLE]))
            return
        if len(self.buf) < 2 + n:
            return
        methods = bytes(self.buf[2 : 2 + n])
        del self.buf[: 2 + n]
        if NO_AUTH not in methods:
            self._fail(conn, bytes([VERSION, NO_ACCEPTABLE]))
            return
        conn.send(bytes([VERSION, NO_AUTH]))
        self.stage = "request"

    def _request(self, conn):
        b = self.buf
        if len(b) < 5:
            return
        ver, cmd, _rsv, atyp = b[0], b[1], b[2], b[3]
        if ver != VERSION:
            self._fail(conn, reply(REP_GENERAL))
            return
        if atyp == ATYP_IPV4:
            end = 4 + 4
            if len(b) < end + 2:
                return
            host = str(ipaddress.IPv4Address(bytes(b[4:end])))
        elif atyp == ATYP_DOMAIN:
            end = 5 + b[4]
            if len(b) < end + 2:
                return
            try:
                host = bytes(b[5:end]).decode("ascii")
            except UnicodeDecodeError:
                self._fail(conn, reply(REP_GENERAL))
                return
        else:
            self._fail(conn, reply(REP_ATYP_UNSUPPORTED))
            return
        (port,) = struct.unpack(">H", b[end : end + 2])
        del b[: end + 2]
        if cmd != CMD_CONNECT:
            self._fail(conn, reply(REP_CMD_UNSUPPORTED))
            return
        self.stage = "connecting"
        self.target = (host, port)
        self.client.open_stream(host, port).add_callback(self._opened)

    def _opened(self, d: Deferred):
        conn = self.conn
        if self.stage != "connecting":
            if not d.error:
                d.result.close()
            return
        if d.error:
            log.info("SOCKS CONNECT %s failed: %s", self.target, d.error)
            self._fail(conn, reply(reply_code(d.error)))
            return
        self.stream = d.result
        self.stream.on_data = conn.send
        self.stream.on_close = lambda _r: self._remote_closed()
        self.stage = "piping"
        conn.send(reply(REP_OK))
        if self.buf:
            self.stream.send(bytes(self.buf))
            self.buf.clear()

    def _remote_closed(self):
        if self.stage == "piping":
            self.stage = "done"
            self.conn.close()

    def connection_lost(self, conn, reason):
        self.stage = "done"
        if self.stream is not None:
            self.stream.close()


def socks5_serve(transport, port: int, client: OnionClient) -> None:
    """Accept SOCKS5 sessions on ``port`` of ``transport``."""

    def accept(conn):
        conn.handler = Socks5Session(client)

    transport.listen(port, accept)
