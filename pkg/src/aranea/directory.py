"""Directory server: stores relay descriptors and serves consensus snapshots.

Wire protocol (over any reliable byte stream, u32 big-endian length prefix)::

    request  = frame(code:u8 || body)     PUBLISH=1 body=descriptor text
                                          FETCH=2   body=empty
    response = frame(status:u8 || body)   OK=0 body=consensus text (FETCH) or empty
                                          ERR=1 body=utf-8 message
"""

from __future__ import annotations

import ipaddress
import logging
import re
import threading
from dataclasses import dataclass, field

from .onioncrypt import NODE_ID_LEN, PUB_LEN, node_id_for
from .transport import Deferred, FrameReader, Protocol, frame

log = logging.getLogger(__name__)

PUBLISH, FETCH = 1, 2
OK, ERR = 0, 1
DEFAULT_EXPIRY = 3600
DEFAULT_PORT = 7000
EXIT = "EXIT"
KNOWN_FLAGS = frozenset({EXIT})

_HOST_RE = re.compile(r"^[A-Za-z0-9]([A-Za-z0-9.-]{0,252})$")


class DirectoryError(Exception):
    pass


def valid_host(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
        return True
    except ValueError:
        return bool(_HOST_RE.match(host)) and ".." not in host


@dataclass(frozen=True)
class RelayDescriptor:
    node_id: bytes
    host: str
    port: int
    identity_pub: bytes
    flags: frozenset = frozenset()
    bandwidth: int = 1
    published_at: int = 0

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    @property
    def is_exit(self) -> bool:
        return EXIT in self.flags

    @property
    def fingerprint(self) -> str:
        return self.node_id.hex()

    def validate(self) -> None:
        if len(self.identity_pub) != PUB_LEN or len(self.node_id) != NODE_ID_LEN:
            raise DirectoryError("bad key or node_id length")
        if self.node_id != node_id_for(self.identity_pub):
            raise DirectoryError("node_id does not match digest of identity key")
        if not valid_host(self.host) or not 0 < self.port < 65536:
            raise DirectoryError(f"malformed address {self.host}:{self.port}")
        if self.bandwidth <= 0:
            raise DirectoryError("bandwidth must be positive")
        if not self.flags <= KNOWN_FLAGS:
            raise DirectoryError(f"unknown flags {sorted(self.flags - KNOWN_FLAGS)}")

    def serialize(self) -> str:
        flags = ",".join(sorted(self.flags)) or "-"
        return (
            f"relay {self.node_id.hex()} {self.host} {self.port}\n"
            f"identity {self.identity_pub.hex()}\n"
            f"flags {flags}\n"
            f"bandwidth {self.bandwidth}\n"
            f"published {self.published_at}\n"
        )

    @classmethod
    def parse(cls, text: str) -> RelayDescriptor:
        try:
            fields = dict(line.split(" ", 1) for line in text.strip().splitlines())
            node_hex, host, port = fields["relay"].split()
            flags = fields["flags"].strip()
            return cls(
                node_id=bytes.fromhex(node_hex),
                host=host,
                port=int(port),
                identity_pub=bytes.fromhex(fields["identity"].strip()),
                flags=frozenset() if flags == "-" else frozenset(flags.split(",")),
                bandwidth=int(fields["bandwidth"]),
                published_at=int(fields["published"]),
            )
        except (KeyError, ValueError) as e:
            raise DirectoryError(f"malformed descriptor: {e}") from None


@dataclass(frozen=True)
class Consensus:
    valid_after: int
    relays: tuple[RelayDescriptor, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ordered = tuple(sorted(self.relays, key=lambda d: d.node_id))
        ids = [d.node_id for d in ordered]
        if len(set(ids)) != len(ids):
            raise DirectoryError("duplicate node_id in consensus")
        object.__setattr__(self, "relays", ordered)

    def __len__(self) -> int:
        return len(self.relays)

    def by_id(self, node_id: bytes) -> RelayDescriptor | None:
        for d in self.relays:
            if d.node_id == node_id:
                return d
        return None

    def serialize(self) -> str:
        body = "".join(d.serialize() for d in self.relays)
        return f"consensus {len(self.relays)}\nvalid-after {self.valid_after}\n{body}end\n"

    @classmethod
    def parse(cls, text: str) -> Consensus:
        lines = text.splitlines(keepends=True)
        try:
            if not lines[0].startswith("consensus ") or lines[-1].strip() != "end":
                raise ValueError("bad framing")
            count = int(lines[0].split()[1])
            valid_after = int(lines[1].split()[1])
        except (IndexError, ValueError) as e:
            raise DirectoryError(f"malformed consensus: {e}") from None
        body = lines[2:-1]
        if len(body) != 5 * count:
            raise DirectoryError("consensus relay count mismatch")
        relays = [RelayDescriptor.parse("".join(body[i : i + 5])) for i in range(0, len(body), 5)]
        return cls(valid_after, tuple(relays))


class DescriptorStore:
    """Synchronized read-mostly table of descriptors keyed by node_id."""

    def __init__(self, expiry: float = DEFAULT_EXPIRY):
        self.expiry = expiry
        self._table: dict[bytes, RelayDescriptor] = {}
        self._lock = threading.Lock()

    def publish(self, desc: RelayDescriptor) -> None:
        desc.validate()
        with self._lock:
            self._table[desc.node_id] = desc

    def consensus(self, now: float) -> Consensus:
        with self._lock:
            live = [d for d in self._table.values() if now - d.published_at <= self.expiry]
        return Consensus(int(now), tuple(live))


class DirectoryServer:
    """Serves a DescriptorStore over a transport. Keeps no per-client state."""

    def __init__(self, transport, port: int = DEFAULT_PORT, expiry: float = DEFAULT_EXPIRY):
        self.transport = transport
        self.port = port
        self.store = DescriptorStore(expiry)
        transport.listen(port, self._accept)

    def publish(self, desc: RelayDescriptor) -> None:
        self.store.publish(desc)

    def fetch_consensus(self) -> Consensus:
        return self.store.consensus(self.transport.now())

    def handle(self, request: bytes) -> bytes:
        if not request:
            return bytes([ERR]) + b"empty request"
        code, body = request[0], request[1:]
        if code == PUBLISH:
            try:
                self.publish(RelayDescriptor.parse(body.decode()))
            except (DirectoryError, UnicodeDecodeError) as e:
                return bytes([ERR]) + str(e).encode()
            return bytes([OK])
        if code == FETCH:
            return bytes([OK]) + self.fetch_consensus().serialize().encode()
        return bytes([ERR]) + f"unknown request code {code}".encode()

    def _accept(self, conn) -> None:
        conn.handler = _ServerConn(self)


class _ServerConn(Protocol):
    def __init__(self, server: DirectoryServer):
        self.server = server
        self.reader = FrameReader()

    def data_received(self, conn, data):
        try:
            frames = self.reader.feed(data)
        except ValueError:
            conn.close()
            return
        for request in frames:
            conn.send(frame(self.server.handle(request)))


class _Request(Protocol):
    def __init__(self, body: bytes, result: Deferred):
        self.body = body
        self.result = result
        self.reader = FrameReader()

    def connection_made(self, conn):
        conn.send(frame(self.body))

    def data_received(self, conn, data):
        for resp in self.reader.feed(data):
            conn.close()
            if resp[:1] == bytes([OK]):
                self.result.resolve(resp[1:])
            else:
                self.result.fail(DirectoryError(resp[1:].decode(errors="replace")))

    def connection_lost(self, conn, reason):
        self.result.fail(DirectoryError(f"directory connection lost: {reason}"))


def request(transport, addr: tuple[str, int], body: bytes) -> Deferred:
    d = Deferred()
    transport.connect(addr[0], addr[1], _Request(body, d))
    return d


def fetch_consensus(transport, addr: tuple[str, int]) -> Deferred:
    out = Deferred()

    def done(d: Deferred):
        if d.error:
            out.fail(d.error)
            return
        try:
            out.resolve(Consensus.parse(d.result.decode()))
        except DirectoryError as e:
            out.fail(e)

    request(transport, addr, bytes([FETCH])).add_callback(done)
    return out


def publish_descriptor(transport, addr: tuple[str, int], desc: RelayDescriptor) -> Deferred:
    return request(transport, addr, bytes([PUBLISH]) + desc.serialize().encode())
