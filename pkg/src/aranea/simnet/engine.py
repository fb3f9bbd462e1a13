"""Deterministic discrete-event network.

Time is a float in virtual seconds. Events are processed in
``(time, insertion sequence)`` order. Every node sends through an optional
egress queue (node bandwidth), then through the per-direction FIFO queue of
the link to the peer::

    delivery = max(prev_delivery, tx_done + latency + U(-j, j) * latency)

where ``tx_done`` accounts for serialization at ``len / bandwidth`` behind
anything already queued in that direction.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from ..transport import Deferred, Protocol
from .trace import TrafficTrace

log = logging.getLogger(__name__)

MSS = 1460
EPHEMERAL_BASE = 40000

SYN, SYNACK, DATA, FIN, RST, DGRAM = "SYN", "SYNACK", "DATA", "FIN", "RST", "DGRAM"
PAYLOAD_KINDS = (DATA, DGRAM)


class SimError(Exception):
    pass


@dataclass(frozen=True)
class LinkParams:
    latency: float = 0.0
    bandwidth: float = 1e12
    jitter: float = 0.0

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")


@dataclass(frozen=True)
class Packet:
    src: str
    sport: int
    dst: str
    dport: int
    kind: str
    payload: bytes = b""
    original_dst: tuple[str, int] | None = None

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass
class _Direction:
    busy_until: float = 0.0
    last_delivery: float = 0.0


class Link:
    def __init__(self, a: str, b: str, params: LinkParams):
        self.a, self.b = a, b
        self.params = params
        self._dirs = {(a, b): _Direction(), (b, a): _Direction()}
        self.taps: list[Tap] = []

    def direction(self, src: str) -> int:
        return 1 if src == self.a else -1

    def peer(self, host: str) -> str:
        return self.b if host == self.a else self.a


@dataclass
class ContentRecord:
    t: float
    src: str
    sport: int
    dst: str
    dport: int
    kind: str
    payload: bytes


class Tap:
    """Passive observer of a link (or of every link touching one node).

    Records only at delivery and never touches the rng or queues.
    """

    def __init__(self, a: str, b: str | None = None, content: bool = False):
        self.a, self.b = a, b
        self.content = content
        self.trace = TrafficTrace()
        self.records: list[ContentRecord] = []
        self.active = True

    def _observe(self, t: float, pkt: Packet) -> None:
        if not self.active:
            return
        if pkt.kind in PAYLOAD_KINDS:
            self.trace.append(round(t * 1e6), 1 if pkt.src == self.a else -1, pkt.size)
        if self.content:
            self.records.append(
                ContentRecord(t, pkt.src, pkt.sport, pkt.dst, pkt.dport, pkt.kind, pkt.payload)
            )

    def detach(self) -> None:
        self.active = False


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimNet:
    def __init__(self, seed: int = 0, default_link: LinkParams | None = None, record_events: bool = False):
        self.seed = seed
        self.default_link = default_link
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self.nodes: dict[str, SimNode] = {}
        self._links: dict[frozenset, Link] = {}
        self._node_taps: dict[str, list[Tap]] = {}
        self.names: dict[str, str] = {}
        self.record_events = record_events
        self.events: list[tuple] = []
        self.stats = {"sent": 0, "delivered": 0, "dropped": 0}
        self._jitter_rng = self.rng("link-jitter")

    # randomness -----------------------------------------------------------

    def rng(self, name: str) -> random.Random:
        """Independent deterministic stream derived from the master seed."""
        return random.Random(f"{self.seed}/{name}")

    # topology -------------------------------------------------------------

    def add_node(self, host: str, bandwidth: float | None = None, wan: bool = True) -> SimNode:
        if host in self.nodes:
            raise SimError(f"duplicate node {host}")
        if bandwidth is not None and bandwidth <= 0:
            raise ValueError("node bandwidth must be > 0")
        node = SimNode(self, host, bandwidth, wan)
        self.nodes[host] = node
        return node

    def add_link(self, a: str, b: str, latency: float = 0.0, bandwidth: float = 1e12, jitter: float = 0.0) -> Link:
        for h in (a, b):
            if h not in self.nodes:
                raise SimError(f"link references unknown node {h}")
        key = frozenset((a, b))
        link = Link(a, b, LinkParams(latency, bandwidth, jitter))
        self._links[key] = link
        return link

    def link(self, a: str, b: str) -> Link | None:
        key = frozenset((a, b))
        link = self._links.get(key)
        if link is None and self.default_link is not None and a != b:
            na, nb = self.nodes.get(a), self.nodes.get(b)
            if na is not None and nb is not None and na.wan and nb.wan:
                link = Link(a, b, self.default_link)
                self._links[key] = link
        return link

    def links(self) -> list[Link]:
        return list(self._links.values())

    def register_name(self, name: str, host: str) -> None:
        self.names[name] = host

    def resolve_name(self, name: str) -> str | None:
        return self.names.get(name)

    # taps -----------------------------------------------------------------

    def tap(self, a: str, b: str, content: bool = False) -> Tap:
        link = self.link(a, b)
        if link is None:
            raise SimError(f"no link between {a} and {b}")
        tap = Tap(a, b, content)
        link.taps.append(tap)
        return tap

    def tap_node(self, host: str, content: bool = True) -> Tap:
        """Observe every delivery to or from ``host``; +1 means sent by it."""
        tap = Tap(host, None, content)
        self._node_taps.setdefault(host, []).append(tap)
        return tap

    # scheduling -----------------------------------------------------------

    def schedule(self, t: float, fn: Callable[[], None]) -> Timer:
        if t < self.now:
            t = self.now
        timer = Timer()
        heapq.heappush(self._queue, (t, self._seq, fn, timer))
        self._seq += 1
        return timer

    def call_later(self, delay: float, fn: Callable[[], None]) -> Timer:
        return self.schedule(self.now + max(delay, 0.0), fn)

    def run_until(self, t: float) -> int:
        """Process every event with time <= t, then set the clock to t."""
        count = 0
        q = self._queue
        while q and q[0][0] <= t:
            when, _, fn, timer = heapq.heappop(q)
            if timer.cancelled:
                continue
            self.now = when
            fn()
            count += 1
        if t > self.now:
            self.now = t
        return count

    def run_for(self, dt: float) -> int:
        return self.run_until(self.now + dt)

    def run(self, limit: float = float("inf")) -> int:
        """Run until the queue drains or virtual time passes ``limit``."""
        count = 0
        q = self._queue
        while q and q[0][0] <= limit:
            when, _, fn, timer = heapq.heappop(q)
            if timer.cancelled:
                continue
            self.now = when
            fn()
            count += 1
        return count

    def wait(self, d: Deferred, timeout: float = 60.0):
        """Advance time until ``d`` resolves; returns its value or raises."""
        deadline = self.now + timeout
        q = self._queue
        while not d.done and q and q[0][0] <= deadline:
            when, _, fn, timer = heapq.heappop(q)
            if timer.cancelled:
                continue
            self.now = when
            fn()
        if not d.done:
            raise SimError(f"timed out after {timeout} virtual seconds")
        return d.value()

    # transmission ---------------------------------------------------------

    def transmit(self, pkt: Packet) -> bool:
        """Queue ``pkt`` for delivery; False when no link exists."""
        link = self.link(pkt.src, pkt.dst)
        if link is None:
            return False
        self.stats["sent"] += 1
        size = pkt.size
        src_node = self.nodes[pkt.src]
        start = self.now
        if src_node.bandwidth is not None and size:
            begin = max(start, src_node.egress_busy)
            src_node.egress_busy = begin + size / src_node.bandwidth
            start = src_node.egress_busy
        d = link._dirs[(pkt.src, pkt.dst)]
        p = link.params
        begin = max(start, d.busy_until)
        d.busy_until = begin + size / p.bandwidth
        arrival = d.busy_until + p.latency
        if p.jitter:
            arrival += self._jitter_rng.uniform(-p.jitter, p.jitter) * p.latency
        arrival = max(arrival, d.last_delivery)
        d.last_delivery = arrival
        self.schedule(arrival, lambda: self._deliver(link, pkt))
        return True

    def _deliver(self, link: Link, pkt: Packet) -> None:
        t = self.now
        for tap in link.taps:
            tap._observe(t, pkt)
        for host in (pkt.src, pkt.dst):
            for tap in self._node_taps.get(host, ()):
                tap._observe(t, pkt)
        if self.record_events:
            self.events.append((t, pkt.src, pkt.sport, pkt.dst, pkt.dport, pkt.kind, pkt.size))
        node = self.nodes[pkt.dst]
        if not node.online:
            self.stats["dropped"] += 1
            return
        if node._receive(pkt):
            self.stats["delivered"] += 1
        else:
            self.stats["dropped"] += 1


class SimConnection:
    def __init__(self, node: SimNode, lport: int, rhost: str, rport: int, handler: Protocol | None):
        self.node = node
        self.lport = lport
        self.rhost, self.rport = rhost, rport
        self.handler = handler or Protocol()
        self.state = "connecting"
        self.original_dst: tuple[str, int] | None = None

    @property
    def key(self):
        return (self.lport, self.rhost, self.rport)

    @property
    def peer(self) -> tuple[str, int]:
        return (self.rhost, self.rport)

    @property
    def local(self) -> tuple[str, int]:
        return (self.node.host, self.lport)

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def _packet(self, kind: str, payload: bytes = b"", original_dst=None) -> Packet:
        return Packet(self.node.host, self.lport, self.rhost, self.rport, kind, payload, original_dst)

    def send(self, data: bytes) -> None:
        if self.state == "closed" or not data:
            return
        net = self.node.net
        for i in range(0, len(data), MSS):
            net.transmit(self._packet(DATA, bytes(data[i : i + MSS])))

    def close(self) -> None:
        if self.state == "closed":
            return
        self.state = "closed"
        self.node._conns.pop(self.key, None)
        self.node.net.transmit(self._packet(FIN))

    def __repr__(self):
        return f"<SimConnection {self.node.host}:{self.lport} -> {self.rhost}:{self.rport} {self.state}>"


class SimNode:
    """One host in the simulated network; doubles as its transport."""

    def __init__(self, net: SimNet, host: str, bandwidth: float | None, wan: bool):
        self.net = net
        self.host = host
        self.bandwidth = bandwidth
        self.wan = wan
        self.online = True
        self.egress_busy = 0.0
        self._listeners: dict[int, Callable] = {}
        self._dgram: dict[int, Callable] = {}
        self._conns: dict[tuple, SimConnection] = {}
        self._next_port = EPHEMERAL_BASE
        # (gateway host, tcp funnel port, dns port): transparent redirection
        self.redirect: tuple[str, int, int] | None = None

    # clock ----------------------------------------------------------------

    def now(self) -> float:
        return self.net.now

    def call_later(self, delay: float, fn: Callable[[], None]) -> Timer:
        return self.net.call_later(delay, fn)

    def resolve_name(self, name: str) -> str | None:
        return self.net.resolve_name(name)

    # streams --------------------------------------------------------------

    def _ephemeral(self) -> int:
        port = self._next_port
        self._next_port += 1
        return port

    def listen(self, port: int, on_accept: Callable[[SimConnection], None]) -> None:
        self._listeners[port] = on_accept

    def stop_listening(self, port: int) -> None:
        self._listeners.pop(port, None)

    def _route(self, host: str, port: int):
        if self.redirect is not None and host != self.redirect[0]:
            return self.redirect[0], self.redirect[1], (host, port)
        return host, port, None

    def connect(self, host: str, port: int, handler: Protocol | None = None) -> SimConnection:
        rhost, rport, original = self._route(host, port)
        conn = SimConnection(self, self._ephemeral(), rhost, rport, handler)
        conn.original_dst = original
        self._conns[conn.key] = conn
        if not self.net.transmit(conn._packet(SYN, original_dst=original)):
            self._conns.pop(conn.key, None)
            conn.state = "closed"
            self.net.call_later(0.0, lambda: conn.handler.connection_lost(conn, "unreachable"))
        return conn

    # datagrams ------------------------------------------------------------

    def bind_datagram(self, port: int | None, fn: Callable[[bytes, tuple[str, int]], None]) -> int:
        if port is None:
            port = self._ephemeral()
        self._dgram[port] = fn
        return port

    def unbind_datagram(self, port: int) -> None:
        self._dgram.pop(port, None)

    def sendto(self, host: str, port: int, data: bytes, sport: int = 0) -> bool:
        original = None
        if self.redirect is not None and host != self.redirect[0] and port == 53:
            original = (host, port)
            host, port = self.redirect[0], self.redirect[2]
        return self.net.transmit(Packet(self.host, sport, host, port, DGRAM, bytes(data), original))

    # receive --------------------------------------------------------------

    def _receive(self, pkt: Packet) -> bool:
        kind = pkt.kind
        if kind == DGRAM:
            fn = self._dgram.get(pkt.dport)
            if fn is None:
                return False
            fn(pkt.payload, (pkt.src, pkt.sport))
            return True
        key = (pkt.dport, pkt.src, pkt.sport)
        if kind == SYN:
            accept = self._listeners.get(pkt.dport)
            if accept is None:
                self.net.transmit(Packet(self.host, pkt.dport, pkt.src, pkt.sport, RST))
                return True
            conn = SimConnection(self, pkt.dport, pkt.src, pkt.sport, None)
            conn.state = "open"
            conn.original_dst = pkt.original_dst
            self._conns[key] = conn
            self.net.transmit(conn._packet(SYNACK))
            accept(conn)
            conn.handler.connection_made(conn)
            return True
        conn = self._conns.get(key)
        if conn is None:
            return False
        if kind == SYNACK:
            conn.state = "open"
            conn.handler.connection_made(conn)
        elif kind == DATA:
            if conn.state != "open":
                return False
            conn.handler.data_received(conn, pkt.payload)
        elif kind in (FIN, RST):
            conn.state = "closed"
            self._conns.pop(key, None)
            conn.handler.connection_lost(conn, "refused" if kind == RST else None)
        return True
