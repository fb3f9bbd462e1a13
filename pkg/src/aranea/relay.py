"""Server node. Accepts circuits, extends them one hop at a time, relays cells,
and, when EXIT-flagged, opens outward streams.

A relay only ever learns the address of the connection a cell arrived on and
the address it is asked to extend or connect to; everything in its audit log
comes from those two sources. Payload bytes are never logged.
"""

from __future__ import annotations

import logging
import random
import socket
from dataclasses import dataclass, field

from . import directory
from .cells import (
    RELAY_DATA_SIZE,
    Cell,
    CellError,
    Command,
    DestroyReason,
    EndReason,
    RelayCommand,
    RelayPayload,
    decode_blob,
    decode_cell,
    decode_extend,
    decode_name,
    decode_relay,
    decode_target,
    encode_blob,
    encode_cell,
    encode_relay,
    encode_resolved,
)
from .directory import EXIT, RelayDescriptor
from .onioncrypt import HandshakeError, HopCrypto, IdentityKeypair, recognized, relay_handshake
from .transport import CellReader, Protocol

log = logging.getLogger(__name__)

DEFAULT_OR_PORT = 9001


def fmt_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


@dataclass
class AuditRecord:
    event: str
    peers: tuple[str, ...]

    def __str__(self):
        return f"{self.event} " + " ".join(self.peers)


class AuditLog:
    """Append-only per-relay record of events and the peer addresses they exposed."""

    def __init__(self):
        self.records: list[AuditRecord] = []

    def add(self, event: str, *peers: str) -> None:
        self.records.append(AuditRecord(event, tuple(peers)))

    def text(self) -> str:
        return "\n".join(str(r) for r in self.records)

    def __len__(self):
        return len(self.records)


@dataclass
class CircuitEntry:
    prev_conn: object
    prev_id: int
    crypto: HopCrypto
    next_conn: object | None = None
    next_id: int | None = None
    extending: bool = False
    streams: dict = field(default_factory=dict)
    closed: bool = False


class ExitStream(Protocol):
    """Bridges one outward connection to RELAY DATA cells."""

    def __init__(self, relay: Relay, entry: CircuitEntry, stream_id: int, resolved: str):
        self.relay = relay
        self.entry = entry
        self.stream_id = stream_id
        self.resolved = resolved
        self.conn = None
        self.connected = False

    def connection_made(self, conn):
        self.connected = True
        data = encode_resolved(self.resolved)[2:6] if self.resolved.count(".") == 3 else b""
        self.relay._send_backward(self.entry, RelayCommand.CONNECTED, self.stream_id, data)

    def data_received(self, conn, data):
        for i in range(0, len(data), RELAY_DATA_SIZE):
            self.relay._send_backward(
                self.entry, RelayCommand.DATA, self.stream_id, data[i : i + RELAY_DATA_SIZE]
            )

    def connection_lost(self, conn, reason):
        if self.entry.streams.pop(self.stream_id, None) is None:
            return
        if reason == "refused":
            code = EndReason.CONNECT_REFUSED
        elif reason == "unreachable":
            code = EndReason.NO_ROUTE
        elif not self.connected:
            code = EndReason.MISC
        else:
            code = EndReason.DONE
        self.relay._send_backward(self.entry, RelayCommand.END, self.stream_id, bytes([code]))


class _ORConn(Protocol):
    def __init__(self, relay: Relay):
        self.relay = relay
        self.reader = CellReader()
        self.pending: list[bytes] = []
        self.open = False

    def connection_made(self, conn):
        self.open = True
        for cell in self.pending:
            conn.send(cell)
        self.pending.clear()

    def data_received(self, conn, data):
        for raw in self.reader.feed(data):
            try:
                cell = decode_cell(raw)
            except CellError as e:
                log.warning("dropping undecodable cell: %s", e)
                continue
            self.relay.on_cell(conn, cell)

    def connection_lost(self, conn, reason):
        self.relay._link_lost(conn, reason)


class Relay:
    def __init__(
        self,
        transport,
        host: str,
        port: int = DEFAULT_OR_PORT,
        identity: IdentityKeypair | None = None,
        is_exit: bool = False,
        bandwidth: int = 1_000_000,
        seed: int | None = 0,
        directory_addr: tuple[str, int] | None = None,
        republish_interval: float | None = None,
    ):
        self.transport = transport
        self.host, self.port = host, port
        self.rng = random.SystemRandom() if seed is None else random.Random(f"relay/{seed}/{host}:{port}")
        self.identity = identity or IdentityKeypair.generate(self.rng)
        self.is_exit = is_exit
        self.bandwidth = bandwidth
        self.directory_addr = directory_addr
        self.republish_interval = republish_interval
        self.audit = AuditLog()
        # (conn, circuit_id) -> (entry, "prev" | "next")
        self.circuits: dict[tuple[object, int], tuple[CircuitEntry, str]] = {}
        self._out_links: dict[tuple[str, int], object] = {}
        self.published = None

    @property
    def node_id(self) -> bytes:
        return self.identity.node_id

    def descriptor(self) -> RelayDescriptor:
        return RelayDescriptor(
            node_id=self.node_id,
            host=self.host,
            port=self.port,
            identity_pub=self.identity.public,
            flags=frozenset({EXIT}) if self.is_exit else frozenset(),
            bandwidth=self.bandwidth,
            published_at=int(self.transport.now()),
        )

    def start(self):
        self.transport.listen(self.port, self._accept)
        self.publish()

    def publish(self):
        if self.directory_addr is None:
            return None
        self.published = directory.publish_descriptor(self.transport, self.directory_addr, self.descriptor())
        if self.republish_interval:
            self.transport.call_later(self.republish_interval, self.publish)
        return self.published

    def _accept(self, conn):
        handler = _ORConn(self)
        handler.open = True
        conn.handler = handler

    @property
    def entries(self) -> list[CircuitEntry]:
        seen, out = set(), []
        for entry, _ in self.circuits.values():
            if id(entry) not in seen:
                seen.add(id(entry))
                out.append(entry)
        return out

    # sending --------------------------------------------------------------

    def _send(self, conn, cell: Cell) -> None:
        raw = encode_cell(cell)
        handler = conn.handler
        if isinstance(handler, _ORConn) and not handler.open:
            handler.pending.append(raw)
        else:
            conn.send(raw)

    def _send_backward(self, entry: CircuitEntry, cmd: RelayCommand, stream_id: int, data: bytes = b""):
        if entry.closed:
            return
        payload = encode_relay(RelayPayload(cmd, stream_id, data))
        payload = entry.crypto.backward_digest.seal(payload)
        payload = entry.crypto.backward.apply(payload)
        self._send(entry.prev_conn, Cell(entry.prev_id, Command.RELAY, payload))

    def _destroy(self, entry: CircuitEntry, reason: DestroyReason, notify_prev=True, notify_next=True):
        if entry.closed:
            return
        entry.closed = True
        payload = bytes([reason])
        if notify_prev:
            self._send(entry.prev_conn, Cell(entry.prev_id, Command.DESTROY, payload))
        if notify_next and entry.next_conn is not None:
            self._send(entry.next_conn, Cell(entry.next_id, Command.DESTROY, payload))
        self.circuits.pop((entry.prev_conn, entry.prev_id), None)
        if entry.next_conn is not None:
            self.circuits.pop((entry.next_conn, entry.next_id), None)
        for stream in list(entry.streams.values()):
            if stream.conn is not None:
                stream.conn.close()
        entry.streams.clear()
        self.audit.add("destroy")

    # dispatch -------------------------------------------------------------

    def on_cell(self, conn, cell: Cell) -> None:
        key = (conn, cell.circuit_id)
        found = self.circuits.get(key)
        if cell.command == Command.CREATE:
            if found is not None:
                self._send(conn, Cell(cell.circuit_id, Command.DESTROY, bytes([DestroyReason.PROTOCOL])))
                return
            self._on_create(conn, cell)
            return
        if found is None:
            if cell.command == Command.DESTROY:
                log.warning("DESTROY for unknown circuit %d", cell.circuit_id)
                self.audit.add("warn-unknown-destroy")
            else:
                log.warning("%s for unknown circuit %d", cell.command.name, cell.circuit_id)
            return
        entry, side = found
        if cell.command == Command.DESTROY:
            self._destroy(entry, DestroyReason.REQUESTED, notify_prev=side == "next", notify_next=side == "prev")
        elif cell.command == Command.CREATED and side == "next":
            self._on_created(entry, cell)
        elif cell.command == Command.RELAY:
            if side == "prev":
                self._relay_forward(entry, cell.payload)
            else:
                payload = entry.crypto.backward.apply(cell.payload)
                self._send(entry.prev_conn, Cell(entry.prev_id, Command.RELAY, payload))
        else:
            self._destroy(entry, DestroyReason.PROTOCOL)

    def _on_create(self, conn, cell: Cell) -> None:
        try:
            keys, reply = relay_handshake(self.identity, decode_blob(cell.payload))
        except (HandshakeError, CellError) as e:
            log.info("handshake failed: %s", e)
            self._send(conn, Cell(cell.circuit_id, Command.DESTROY, bytes([DestroyReason.HANDSHAKE_FAILED])))
            return
        entry = CircuitEntry(conn, cell.circuit_id, HopCrypto(keys))
        self.circuits[(conn, cell.circuit_id)] = (entry, "prev")
        self.audit.add("create", fmt_addr(conn.peer))
        self._send(conn, Cell(cell.circuit_id, Command.CREATED, encode_blob(reply)))

    def _on_created(self, entry: CircuitEntry, cell: Cell) -> None:
        if not entry.extending:
            self._destroy(entry, DestroyReason.PROTOCOL)
            return
        entry.extending = False
        try:
            reply = decode_blob(cell.payload)
        except CellError:
            self._destroy(entry, DestroyReason.PROTOCOL)
            return
        self.audit.add("extended", fmt_addr(entry.next_conn.peer))
        self._send_backward(entry, RelayCommand.EXTENDED, 0, encode_blob(reply))

    def _relay_forward(self, entry: CircuitEntry, payload: bytes) -> None:
        payload = entry.crypto.forward.apply(payload)
        if recognized(payload, entry.crypto.forward_digest):
            try:
                msg = decode_relay(payload)
            except CellError:
                self._destroy(entry, DestroyReason.PROTOCOL)
                return
            self._handle_relay(entry, msg)
        elif entry.next_conn is not None and not entry.extending:
            self._send(entry.next_conn, Cell(entry.next_id, Command.RELAY, payload))
        else:
            self._destroy(entry, DestroyReason.PROTOCOL)

    # relay commands -------------------------------------------------------

    def _handle_relay(self, entry: CircuitEntry, msg: RelayPayload) -> None:
        cmd = msg.relay_cmd
        if cmd == RelayCommand.EXTEND:
            self._on_extend(entry, msg)
        elif cmd == RelayCommand.BEGIN:
            self._on_begin(entry, msg)
        elif cmd == RelayCommand.DATA:
            stream = entry.streams.get(msg.stream_id)
            if stream is not None and stream.conn is not None:
                stream.conn.send(msg.body)
        elif cmd == RelayCommand.END:
            stream = entry.streams.pop(msg.stream_id, None)
            if stream is not None and stream.conn is not None:
                stream.conn.close()
        elif cmd == RelayCommand.RESOLVE:
            self._on_resolve(entry, msg)
        else:
            log.warning("unexpected forward relay command %s", cmd.name)

    def _on_extend(self, entry: CircuitEntry, msg: RelayPayload) -> None:
        if entry.next_conn is not None or entry.extending:
            self._destroy(entry, DestroyReason.PROTOCOL)
            return
        try:
            host, port, _node_id, blob = decode_extend(msg.body)
        except CellError:
            self._destroy(entry, DestroyReason.PROTOCOL)
            return
        conn = self._link_to((host, port))
        next_id = self._fresh_circuit_id(conn)
        entry.next_conn, entry.next_id, entry.extending = conn, next_id, True
        self.circuits[(conn, next_id)] = (entry, "next")
        self.audit.add("extend", fmt_addr(entry.prev_conn.peer), fmt_addr((host, port)))
        self._send(conn, Cell(next_id, Command.CREATE, encode_blob(blob)))

    def _link_to(self, addr: tuple[str, int]):
        conn = self._out_links.get(addr)
        if conn is not None and getattr(conn, "state", "open") != "closed":
            return conn
        handler = _ORConn(self)
        conn = self.transport.connect(addr[0], addr[1], handler)
        self._out_links[addr] = conn
        return conn

    def _fresh_circuit_id(self, conn) -> int:
        while True:
            cid = self.rng.getrandbits(32)
            if cid and (conn, cid) not in self.circuits:
                return cid

    def _resolve(self, host: str) -> str | None:
        try:
            socket.inet_aton(host)
            if host.count(".") == 3:
                return host
        except OSError:
            pass
        return self.transport.resolve_name(host)

    def _on_begin(self, entry: CircuitEntry, msg: RelayPayload) -> None:
        sid = msg.stream_id
        if not self.is_exit:
            self._send_backward(entry, RelayCommand.END, sid, bytes([EndReason.EXIT_POLICY]))
            return
        if sid in entry.streams:
            self._send_backward(entry, RelayCommand.END, sid, bytes([EndReason.PROTOCOL]))
            return
        try:
            host, port = decode_target(msg.body)
        except (CellError, UnicodeDecodeError):
            self._send_backward(entry, RelayCommand.END, sid, bytes([EndReason.PROTOCOL]))
            return
        address = self._resolve(host)
        self.audit.add("begin", fmt_addr(entry.prev_conn.peer), fmt_addr((host, port)))
        if address is None:
            self._send_backward(entry, RelayCommand.END, sid, bytes([EndReason.RESOLVE_FAILED]))
            return
        stream = ExitStream(self, entry, sid, address)
        entry.streams[sid] = stream
        stream.conn = self.transport.connect(address, port, stream)

    def _on_resolve(self, entry: CircuitEntry, msg: RelayPayload) -> None:
        name = decode_name(msg.body)
        if not self.is_exit:
            self._send_backward(entry, RelayCommand.RESOLVED, msg.stream_id, encode_resolved(None))
            return
        self.audit.add("resolve", fmt_addr(entry.prev_conn.peer), name)
        address = self._resolve(name)
        self._send_backward(entry, RelayCommand.RESOLVED, msg.stream_id, encode_resolved(address))

    def _link_lost(self, conn, reason) -> None:
        for (c, _cid), (entry, side) in list(self.circuits.items()):
            if c is conn:
                self._destroy(entry, DestroyReason.CONNECT_FAILED, notify_prev=side == "next", notify_next=side == "prev")
        for addr, c in list(self._out_links.items()):
            if c is conn:
                del self._out_links[addr]
