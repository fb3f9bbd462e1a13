"""Real-socket transport: the same interface as a sim node, over TCP and UDP sockets.

Every callback runs under one per-node lock, so node code stays effectively
single-threaded. As in the simulator, closing a connection locally fires no
callback on the closing side.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable

from .transport import Deferred, Protocol

log = logging.getLogger(__name__)

CONNECT_TIMEOUT = 10.0
RECV_SIZE = 65536


class _Timer:
    def __init__(self, transport: SocketTransport, delay: float, fn: Callable[[], None]):
        self.cancelled = False
        self._t = threading.Timer(max(0.0, delay), self._fire, args=(transport, fn))
        self._t.daemon = True
        self._t.start()

    def _fire(self, transport, fn):
        with transport.lock:
            if not self.cancelled:
                fn()

    def cancel(self) -> None:
        self.cancelled = True
        self._t.cancel()


class SocketConnection:
    def __init__(self, transport: SocketTransport, handler: Protocol | None, peer: tuple[str, int]):
        self.transport = transport
        self.handler = handler
        self._peer = peer
        self.sock: socket.socket | None = None
        self.state = "connecting"
        self.original_dst = None
        self._pending: list[bytes] = []

    @property
    def peer(self) -> tuple[str, int]:
        return self._peer

    @property
    def local(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2] if self.sock else ("0.0.0.0", 0)

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def send(self, data: bytes) -> None:
        if self.state == "closed" or not data:
            return
        if self.state == "connecting":
            self._pending.append(bytes(data))
            return
        try:
            self.sock.sendall(data)
        except OSError as e:
            self._lost(f"send failed: {e}")

    def close(self) -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        if self.sock is not None:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()

    def _opened(self, sock: socket.socket) -> None:
        self.sock = sock
        if self.state == "closed":
            sock.close()
            return
        self.state = "open"
        self.handler.connection_made(self)
        for chunk in self._pending:
            self.send(chunk)
        self._pending.clear()
        threading.Thread(target=self._read_loop, daemon=True).start()

    def _read_loop(self) -> None:
        sock = self.sock
        while True:
            try:
                data = sock.recv(RECV_SIZE)
            except OSError:
                data = b""
            with self.transport.lock:
                if self.state == "closed":
                    return
                if not data:
                    self._lost(None)
                    return
                self.handler.data_received(self, data)

    def _lost(self, reason) -> None:
        if self.state == "closed":
            return
        self.close()
        self.handler.connection_lost(self, reason)

    def __repr__(self):
        return f"<SocketConnection {self._peer[0]}:{self._peer[1]} {self.state}>"


class SocketTransport:
    def __init__(self, bind_host: str = "127.0.0.1"):
        self.host = bind_host
        self.lock = threading.RLock()
        self._stop = threading.Event()
        self._servers: dict[int, socket.socket] = {}
        self._dgram: dict[int, socket.socket] = {}

    def now(self) -> float:
        # wall clock, because descriptor timestamps are compared across hosts
        return time.time()

    def call_later(self, delay: float, fn: Callable[[], None]) -> _Timer:
        return _Timer(self, delay, fn)

    def resolve_name(self, name: str) -> str | None:
        try:
            infos = socket.getaddrinfo(name, None, socket.AF_INET, socket.SOCK_STREAM)
        except OSError:
            return None
        return infos[0][4][0] if infos else None

    # streams --------------------------------------------------------------

    def listen(self, port: int, on_accept: Callable[[SocketConnection], None]) -> int:
        srv = socket.create_server((self.host, port), reuse_port=False)
        port = srv.getsockname()[1]
        self._servers[port] = srv

        def loop():
            while not self._stop.is_set():
                try:
                    sock, addr = srv.accept()
                except OSError:
                    return
                with self.lock:
                    conn = SocketConnection(self, None, addr[:2])
                    on_accept(conn)
                    conn._opened(sock)

        threading.Thread(target=loop, daemon=True).start()
        return port

    def stop_listening(self, port: int) -> None:
        srv = self._servers.pop(port, None)
        if srv is not None:
            srv.close()

    def connect(self, host: str, port: int, handler: Protocol | None = None) -> SocketConnection:
        conn = SocketConnection(self, handler, (host, port))

        def dial():
            try:
                sock = socket.create_connection((host, port), timeout=CONNECT_TIMEOUT)
                sock.settimeout(None)
            except ConnectionRefusedError:
                reason = "refused"
            except OSError:
                reason = "unreachable"
            else:
                with self.lock:
                    conn._opened(sock)
                return
            with self.lock:
                if conn.state != "closed":
                    conn.state = "closed"
                    conn.handler.connection_lost(conn, reason)

        threading.Thread(target=dial, daemon=True).start()
        return conn

    # datagrams ------------------------------------------------------------

    def bind_datagram(self, port: int | None, fn: Callable[[bytes, tuple[str, int]], None]) -> int:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((self.host, port or 0))
        port = sock.getsockname()[1]
        self._dgram[port] = sock

        def loop():
            while True:
                try:
                    data, addr = sock.recvfrom(RECV_SIZE)
                except OSError:
                    return
                with self.lock:
                    if self._dgram.get(port) is sock:
                        fn(data, addr[:2])

        threading.Thread(target=loop, daemon=True).start()
        return port

    def unbind_datagram(self, port: int) -> None:
        sock = self._dgram.pop(port, None)
        if sock is not None:
            sock.close()

    def sendto(self, host: str, port: int, data: bytes, sport: int = 0) -> bool:
        sock = self._dgram.get(sport)
        try:
            if sock is not None:
                sock.sendto(data, (host, port))
            else:
                with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as tmp:
                    tmp.sendto(data, (host, port))
        except OSError as e:
            log.info("sendto %s:%d failed: %s", host, port, e)
            return False
        return True

    # lifecycle ------------------------------------------------------------

    def wait(self, d: Deferred, timeout: float = 30.0):
        """Block the calling (non-callback) thread until ``d`` settles."""
        done = threading.Event()
        with self.lock:
            d.add_callback(lambda _d: done.set())
        if not done.wait(timeout):
            raise TimeoutError("timed out waiting for result")
        return d.value()

    def run_forever(self) -> None:
        try:
            while not self._stop.wait(0.5):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        self._stop.set()
        for port in list(self._servers):
            self.stop_listening(port)
        for port in list(self._dgram):
            self.unbind_datagram(port)
