"""Client node: path selection, incremental circuit construction, streams and rotation."""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .. import directory
from ..cells import (
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
    decode_relay,
    decode_resolved,
    encode_blob,
    encode_cell,
    encode_extend,
    encode_name,
    encode_relay,
    encode_target,
)
from ..directory import Consensus, RelayDescriptor
from ..onioncrypt import (
    HandshakeError,
    HopCrypto,
    client_handshake_finish,
    client_handshake_start,
    peel_backward,
    wrap_forward,
)
from ..transport import CellReader, Deferred, Protocol

log = logging.getLogger(__name__)

PATH_LENGTH = 3
DEFAULT_ROTATION = 600.0
DEFAULT_BUILD_TIMEOUT = 10.0
DEFAULT_STREAM_TIMEOUT = 10.0


class PathSelectionError(Exception):
    pass


class CircuitBuildError(Exception):
    def __init__(self, hop_index: int, reason: str):
        super().__init__(f"circuit build failed at hop {hop_index}: {reason}")
        self.hop_index = hop_index
        self.reason = reason


class StreamError(Exception):
    def __init__(self, reason: int | str):
        name = EndReason(reason).name if isinstance(reason, int) and reason in EndReason._value2member_map_ else reason
        super().__init__(f"stream failed: {name}")
        self.reason = reason


class ResolveError(Exception):
    pass


class ResolveTimeout(ResolveError):
    pass


@dataclass(frozen=True)
class PathConstraints:
    path_length: int = PATH_LENGTH
    require_exit_last: bool = True

    def check(self, path: Sequence[RelayDescriptor]) -> None:
        if len(path) != self.path_length:
            raise PathSelectionError(f"path has {len(path)} hops, need {self.path_length}")
        if len({d.node_id for d in path}) != len(path):
            raise PathSelectionError("path hops are not distinct")
        if self.require_exit_last and not path[-1].is_exit:
            raise PathSelectionError("final hop lacks the EXIT flag")


def select_path(consensus: Consensus, rng: random.Random, constraints: PathConstraints = PathConstraints()):
    """Uniform over all ordered triples of distinct relays ending in an exit.

    Every exit ends exactly (n-1)(n-2) valid triples, so drawing the exit
    uniformly and then an ordered pair from the rest is uniform over triples.
    """
    relays = list(consensus.relays)
    exits = [d for d in relays if d.is_exit]
    n = constraints.path_length
    if len(relays) < n or not exits:
        raise PathSelectionError(
            f"insufficient relays: {len(relays)} relays ({len(exits)} exit), need {n} with >= 1 exit"
        )
    last = rng.choice(exits)
    rest = [d for d in relays if d.node_id != last.node_id]
    path = rng.sample(rest, n - 1) + [last]
    constraints.check(path)
    return path


class CircuitState(enum.Enum):
    BUILDING = "building"
    OPEN = "open"
    CLOSED = "closed"


class StreamState(enum.Enum):
    OPENING = "opening"
    OPEN = "open"
    CLOSED = "closed"


class ClientStream:
    def __init__(self, circuit: Circuit, stream_id: int):
        self.circuit = circuit
        self.stream_id = stream_id
        self.state = StreamState.OPENING
        self.opened = Deferred()
        self.received = bytearray()
        self.on_data: Callable[[bytes], None] | None = None
        self.on_close: Callable[[int | None], None] | None = None
        self.end_reason: int | None = None
        self._timer = None

    def send(self, data: bytes) -> None:
        if self.state != StreamState.OPEN:
            raise StreamError("stream not open")
        for i in range(0, len(data), RELAY_DATA_SIZE):
            self.circuit.send_relay(RelayCommand.DATA, self.stream_id, data[i : i + RELAY_DATA_SIZE])

    def close(self) -> None:
        """Send END once; later calls are no-ops."""
        if self.state == StreamState.CLOSED:
            return
        self.state = StreamState.CLOSED
        self.circuit.send_relay(RelayCommand.END, self.stream_id, bytes([EndReason.DONE]))
        self.circuit._stream_gone(self)

    def _on_relay(self, msg: RelayPayload) -> None:
        cmd = msg.relay_cmd
        if cmd == RelayCommand.CONNECTED and self.state == StreamState.OPENING:
            self.state = StreamState.OPEN
            if self._timer:
                self._timer.cancel()
            self.opened.resolve(self)
        elif cmd == RelayCommand.DATA and self.state == StreamState.OPEN:
            data = msg.body
            self.received += data
            if self.on_data:
                self.on_data(data)
        elif cmd == RelayCommand.END:
            self._ended(msg.body[0] if msg.length else EndReason.MISC)

    def _ended(self, reason) -> None:
        was = self.state
        self.state = StreamState.CLOSED
        self.end_reason = reason
        if self._timer:
            self._timer.cancel()
        self.circuit._stream_gone(self)
        if was == StreamState.OPENING:
            self.opened.fail(StreamError(reason))
        elif was == StreamState.OPEN and self.on_close:
            self.on_close(reason)


class Circuit:
    def __init__(self, client: OnionClient, conn, circuit_id: int, path: Sequence[RelayDescriptor]):
        self.client = client
        self.conn = conn
        self.circuit_id = circuit_id
        self.path = list(path)
        self.hops: list[HopCrypto] = []
        self.state = CircuitState.BUILDING
        self.built_at: float | None = None
        self.streams: dict[int, ClientStream] = {}
        self.attach_times: list[float] = []
        self.built = Deferred()
        self._next_stream = 1
        self._pending_hs = None
        self._timer = None
        self._resolves: dict[int, Deferred] = {}

    # building -------------------------------------------------------------

    def _start(self) -> None:
        self._next_handshake()

    def _next_handshake(self) -> None:
        idx = len(self.hops)
        target = self.path[idx]
        self._pending_hs = client_handshake_start(self.client.rng, target.node_id, target.identity_pub)
        blob = self._pending_hs.blob
        if idx == 0:
            self.client._send(self.conn, Cell(self.circuit_id, Command.CREATE, encode_blob(blob)))
        else:
            body = encode_extend(target.host, target.port, target.node_id, blob)
            self.send_relay(RelayCommand.EXTEND, 0, body, hop=idx - 1)
        self._arm(idx)

    def _arm(self, idx: int) -> None:
        if self._timer:
            self._timer.cancel()
        self._timer = self.client.transport.call_later(
            self.client.build_timeout, lambda: self._build_failed(idx, "timeout", notify=True)
        )

    def _finish_hop(self, blob: bytes) -> None:
        idx = len(self.hops)
        try:
            keys = client_handshake_finish(self._pending_hs, blob)
        except HandshakeError as e:
            self._build_failed(idx, str(e), notify=True)
            return
        self.hops.append(HopCrypto(keys))
        self._pending_hs = None
        if len(self.hops) < len(self.path):
            self._next_handshake()
            return
        self._timer.cancel()
        self.state = CircuitState.OPEN
        self.built_at = self.client.transport.now()
        self.built.resolve(self)

    def _build_failed(self, idx: int, reason: str, notify: bool) -> None:
        if self.state != CircuitState.BUILDING:
            return
        self._teardown(notify)
        self.built.fail(CircuitBuildError(idx, reason))

    # cell io --------------------------------------------------------------

    def send_relay(self, cmd: RelayCommand, stream_id: int, data: bytes = b"", hop: int | None = None) -> None:
        if self.state == CircuitState.CLOSED:
            return
        hop = len(self.hops) - 1 if hop is None else hop
        payload = encode_relay(RelayPayload(cmd, stream_id, data))
        payload = self.hops[hop].forward_digest.seal(payload)
        payload = wrap_forward(self.hops[: hop + 1], payload)
        self.client._send(self.conn, Cell(self.circuit_id, Command.RELAY, payload))

    def _on_cell(self, cell: Cell) -> None:
        if cell.command == Command.CREATED and self.state == CircuitState.BUILDING and not self.hops:
            try:
                blob = decode_blob(cell.payload)
            except CellError:
                self._build_failed(0, "malformed CREATED", notify=True)
                return
            self._finish_hop(blob)
        elif cell.command == Command.DESTROY:
            reason = DestroyReason(cell.payload[0]) if cell.payload[0] in DestroyReason._value2member_map_ else cell.payload[0]
            if self.state == CircuitState.BUILDING:
                self._build_failed(len(self.hops), f"destroyed ({reason})", notify=False)
            else:
                self._teardown(notify=False)
        elif cell.command == Command.RELAY and self.hops:
            peeled = peel_backward(self.hops, cell.payload)
            if peeled is None:
                log.warning("unrecognized backward cell on circuit %d", self.circuit_id)
                self.close()
                return
            hop, payload = peeled
            try:
                msg = decode_relay(payload)
            except CellError:
                self.close()
                return
            self._on_relay(hop, msg)

    def _on_relay(self, hop: int, msg: RelayPayload) -> None:
        cmd = msg.relay_cmd
        if cmd == RelayCommand.EXTENDED:
            if self.state == CircuitState.BUILDING and hop == len(self.hops) - 1:
                try:
                    blob = decode_blob(msg.body)
                except CellError:
                    self._build_failed(len(self.hops), "malformed EXTENDED", notify=True)
                    return
                self._finish_hop(blob)
            return
        if cmd == RelayCommand.RESOLVED:
            d = self._resolves.pop(msg.stream_id, None)
            if d is not None:
                try:
                    _kind, addr = decode_resolved(msg.body)
                except CellError:
                    addr = None
                if addr is None:
                    d.fail(ResolveError("resolution failed at exit"))
                else:
                    d.resolve(addr)
            return
        stream = self.streams.get(msg.stream_id)
        if stream is not None:
            stream._on_relay(msg)
        elif cmd == RelayCommand.END and msg.stream_id in self._resolves:
            self._resolves.pop(msg.stream_id).fail(ResolveError("resolve refused"))

    # streams --------------------------------------------------------------

    def _alloc_stream_id(self) -> int:
        sid = self._next_stream
        self._next_stream = sid % 0xFFFF + 1
        return sid

    def open_stream(self, host: str, port: int) -> ClientStream:
        if self.state != CircuitState.OPEN:
            raise StreamError("circuit not open")
        stream = ClientStream(self, self._alloc_stream_id())
        self.streams[stream.stream_id] = stream
        self.attach_times.append(self.client.transport.now())
        self.send_relay(RelayCommand.BEGIN, stream.stream_id, encode_target(host, port))
        stream._timer = self.client.transport.call_later(
            self.client.stream_timeout, lambda: stream._ended(EndReason.TIMEOUT)
        )
        return stream

    def resolve(self, name: str) -> Deferred:
        d = Deferred()
        if self.state != CircuitState.OPEN:
            d.fail(ResolveError("circuit not open"))
            return d
        sid = self._alloc_stream_id()
        self._resolves[sid] = d
        self.send_relay(RelayCommand.RESOLVE, sid, encode_name(name))
        timer = self.client.transport.call_later(
            self.client.stream_timeout,
            lambda: self._resolves.pop(sid, None) and d.fail(ResolveTimeout("resolve timed out")),
        )
        d.add_callback(lambda _d: timer.cancel())
        return d

    def _stream_gone(self, stream: ClientStream) -> None:
        self.streams.pop(stream.stream_id, None)
        if not self.streams and self is not self.client.current and self.state == CircuitState.OPEN:
            self.close()

    def close(self) -> None:
        self._teardown(notify=True)

    def _teardown(self, notify: bool) -> None:
        if self.state == CircuitState.CLOSED:
            return
        if notify:
            self.client._send(self.conn, Cell(self.circuit_id, Command.DESTROY, bytes([DestroyReason.REQUESTED])))
        self.state = CircuitState.CLOSED
        if self._timer:
            self._timer.cancel()
        self.client._circuits.pop((self.conn, self.circuit_id), None)
        for stream in list(self.streams.values()):
            if stream.state != StreamState.CLOSED:
                stream._ended(EndReason.DESTROY)
        for d in self._resolves.values():
            d.fail(ResolveError("circuit closed"))
        self._resolves.clear()

    def __repr__(self):
        return f"<Circuit {self.circuit_id} {self.state.value} hops={len(self.hops)}>"


class _ClientLink(Protocol):
    def __init__(self, client: OnionClient):
        self.client = client
        self.reader = CellReader()
        self.open = False
        self.pending: list[bytes] = []

    def connection_made(self, conn):
        self.open = True
        for raw in self.pending:
            conn.send(raw)
        self.pending.clear()

    def data_received(self, conn, data):
        for raw in self.reader.feed(data):
            try:
                cell = decode_cell(raw)
            except CellError:
                continue
            circ = self.client._circuits.get((conn, cell.circuit_id))
            if circ is not None:
                circ._on_cell(cell)

    def connection_lost(self, conn, reason):
        for (c, _), circ in list(self.client._circuits.items()):
            if c is conn:
                if circ.state == CircuitState.BUILDING:
                    circ._build_failed(len(circ.hops), f"link lost ({reason})", notify=False)
                else:
                    circ._teardown(notify=False)
        self.client._links = {a: c for a, c in self.client._links.items() if c is not conn}


@dataclass
class ClientConfig:
    directory: tuple[str, int]
    rotation_period: float = DEFAULT_ROTATION
    seed: int | None = 0
    build_timeout: float = DEFAULT_BUILD_TIMEOUT
    stream_timeout: float = DEFAULT_STREAM_TIMEOUT
    socks_listen: tuple[str, int] | None = None

    def __post_init__(self):
        if self.rotation_period <= 0:
            raise ValueError("rotation period must be > 0")


def is_fresh(built_at: float, now: float, period: float) -> bool:
    """A circuit is reusable while strictly younger than the rotation period."""
    return now - built_at < period


class OnionClient:
    def __init__(self, transport, config: ClientConfig, name: str = "client"):
        self.transport = transport
        self.config = config
        # no seed means live use: circuit ids and handshake keys come from the OS CSPRNG
        self.rng = random.SystemRandom() if config.seed is None else random.Random(f"client/{config.seed}/{name}")
        self.build_timeout = config.build_timeout
        self.stream_timeout = config.stream_timeout
        self.constraints = PathConstraints()
        self.consensus: Consensus | None = None
        self.current: Circuit | None = None
        self.history: list[Circuit] = []
        self._circuits: dict[tuple[object, int], Circuit] = {}
        self._links: dict[tuple[str, int], object] = {}
        self._building: Deferred | None = None

    # plumbing -------------------------------------------------------------

    def _send(self, conn, cell: Cell) -> None:
        raw = encode_cell(cell)
        if isinstance(conn.handler, _ClientLink) and not conn.handler.open:
            conn.handler.pending.append(raw)
        else:
            conn.send(raw)

    def _link_to(self, desc: RelayDescriptor):
        conn = self._links.get(desc.address)
        if conn is None or getattr(conn, "state", "open") == "closed":
            conn = self.transport.connect(desc.host, desc.port, _ClientLink(self))
            self._links[desc.address] = conn
        return conn

    def fetch_consensus(self) -> Deferred:
        d = directory.fetch_consensus(self.transport, self.config.directory)

        def keep(r: Deferred):
            if not r.error:
                self.consensus = r.result

        return d.add_callback(keep)

    # circuits -------------------------------------------------------------

    def build_circuit(self, path: Sequence[RelayDescriptor]) -> Circuit:
        """Start a telescoping build along ``path``; wait on ``circuit.built``."""
        conn = self._link_to(path[0])
        while True:
            cid = self.rng.getrandbits(32)
            if cid and (conn, cid) not in self._circuits:
                break
        circ = Circuit(self, conn, cid, path)
        self._circuits[(conn, cid)] = circ
        self.history.append(circ)
        circ._start()
        return circ

    def pick_circuit(self) -> Deferred:
        now = self.transport.now()
        cur = self.current
        if cur is not None and cur.state == CircuitState.OPEN and is_fresh(cur.built_at, now, self.config.rotation_period):
            return _resolved(cur)
        if self._building is not None:
            out = Deferred()
            self._building.chain(out)
            return out
        self._building = building = Deferred()

        def got_consensus(d: Deferred):
            if d.error:
                self._finish_build(building, error=d.error)
                return
            try:
                path = select_path(d.result, self.rng, self.constraints)
            except PathSelectionError as e:
                self._finish_build(building, error=e)
                return
            circ = self.build_circuit(path)
            circ.built.add_callback(
                lambda b: self._finish_build(building, error=b.error) if b.error else self._finish_build(building, circ)
            )

        self.fetch_consensus().add_callback(got_consensus)
        out = Deferred()
        building.chain(out)
        return out

    def _finish_build(self, building: Deferred, circ: Circuit | None = None, error=None) -> None:
        self._building = None
        if error is not None:
            building.fail(error)
            return
        old, self.current = self.current, circ
        if old is not None and old.state == CircuitState.OPEN and not old.streams:
            old.close()
        building.resolve(circ)

    def open_stream(self, host: str, port: int) -> Deferred:
        """Attach a new stream to the current circuit; resolves once CONNECTED."""
        out = Deferred()

        def attach(d: Deferred):
            if d.error:
                out.fail(d.error)
                return
            try:
                stream = d.result.open_stream(host, port)
            except StreamError as e:
                out.fail(e)
                return
            stream.opened.chain(out)

        self.pick_circuit().add_callback(attach)
        return out

    def resolve(self, name: str) -> Deferred:
        out = Deferred()

        def ask(d: Deferred):
            if d.error:
                out.fail(d.error)
            else:
                d.result.resolve(name).chain(out)

        self.pick_circuit().add_callback(ask)
        return out

    def close(self) -> None:
        for circ in list(self._circuits.values()):
            circ.close()
        self.current = None


def _resolved(value) -> Deferred:
    d = Deferred()
    d.resolve(value)
    return d
