"""Fixed-size cell wire format and the relay sub-payload layout.

Cell (512 bytes, big-endian)::

    0..3    circuit_id   u32
    4       command      u8   CREATE=1 CREATED=2 RELAY=3 DESTROY=4
    5..511  payload      507 bytes, zero padded

Relay payload (507 bytes, carried inside a RELAY cell)::

    0       relay_cmd    u8
    1..2    recognized   2 bytes, zero when addressed to the checking hop
    3..4    stream_id    u16
    5..8    digest       4 bytes
    9..10   length       u16 (<= 496)
    11..506 data         496 bytes, zero padded
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

CELL_SIZE = 512
CELL_HEADER = 5
PAYLOAD_SIZE = CELL_SIZE - CELL_HEADER  # 507
RELAY_HEADER = 11
RELAY_DATA_SIZE = PAYLOAD_SIZE - RELAY_HEADER  # 496

_CELL_HDR = struct.Struct(">IB")
_RELAY_HDR = struct.Struct(">B2sH4sH")


class CellError(ValueError):
    """Raised for any encoding or decoding failure of a cell or relay payload."""


class Command(enum.IntEnum):
    CREATE = 1
    CREATED = 2
    RELAY = 3
    DESTROY = 4


class RelayCommand(enum.IntEnum):
    BEGIN = 1
    CONNECTED = 2
    DATA = 3
    END = 4
    EXTEND = 5
    EXTENDED = 6
    RESOLVE = 7
    RESOLVED = 8


CIRCUIT_LEVEL = frozenset({RelayCommand.EXTEND, RelayCommand.EXTENDED})


class EndReason(enum.IntEnum):
    MISC = 1
    RESOLVE_FAILED = 2
    CONNECT_REFUSED = 3
    EXIT_POLICY = 4
    DESTROY = 5
    DONE = 6
    TIMEOUT = 7
    NO_ROUTE = 8
    PROTOCOL = 9


class DestroyReason(enum.IntEnum):
    NONE = 0
    PROTOCOL = 1
    INTERNAL = 2
    REQUESTED = 3
    CONNECT_FAILED = 4
    HANDSHAKE_FAILED = 5
    TIMEOUT = 6


@dataclass(frozen=True)
class Cell:
    circuit_id: int
    command: Command
    payload: bytes = b""

    def __post_init__(self) -> None:
        if not 0 <= self.circuit_id <= 0xFFFFFFFF:
            raise CellError(f"circuit_id out of range: {self.circuit_id}")
        if len(self.payload) > PAYLOAD_SIZE:
            raise CellError(f"payload too large: {len(self.payload)} > {PAYLOAD_SIZE}")
        # normalise to the padded form so equality survives a round trip
        if len(self.payload) < PAYLOAD_SIZE:
            object.__setattr__(self, "payload", self.payload.ljust(PAYLOAD_SIZE, b"\0"))


@dataclass(frozen=True)
class RelayPayload:
    relay_cmd: RelayCommand
    stream_id: int = 0
    data: bytes = b""
    recognized: bytes = b"\0\0"
    digest: bytes = b"\0\0\0\0"
    length: int | None = None

    def __post_init__(self) -> None:
        if len(self.data) > RELAY_DATA_SIZE:
            raise CellError(f"relay data too large: {len(self.data)}")
        if self.length is None:
            object.__setattr__(self, "length", len(self.data))
        if not 0 <= self.length <= RELAY_DATA_SIZE:
            raise CellError(f"relay length field exceeds {RELAY_DATA_SIZE}: {self.length}")
        if len(self.data) < RELAY_DATA_SIZE:
            object.__setattr__(self, "data", self.data.ljust(RELAY_DATA_SIZE, b"\0"))
        if len(self.recognized) != 2 or len(self.digest) != 4:
            raise CellError("recognized must be 2 bytes and digest 4 bytes")
        if not 0 <= self.stream_id <= 0xFFFF:
            raise CellError(f"stream_id out of range: {self.stream_id}")
        if (self.stream_id == 0) != (self.relay_cmd in CIRCUIT_LEVEL):
            raise CellError(
                f"stream_id {self.stream_id} not allowed with {RelayCommand(self.relay_cmd).name}"
            )

    @property
    def body(self) -> bytes:
        """The meaningful prefix of ``data``."""
        return self.data[: self.length]


def encode_cell(cell: Cell) -> bytes:
    return _CELL_HDR.pack(cell.circuit_id, int(cell.command)) + cell.payload


def decode_cell(buf: bytes) -> Cell:
    if len(buf) < CELL_SIZE:
        raise CellError(f"short cell: {len(buf)} bytes")
    if len(buf) > CELL_SIZE:
        raise CellError(f"oversized cell: {len(buf)} bytes")
    circuit_id, code = _CELL_HDR.unpack_from(buf)
    try:
        command = Command(code)
    except ValueError:
        raise CellError(f"unknown command {code}") from None
    return Cell(circuit_id, command, bytes(buf[CELL_HEADER:]))


def split_cells(stream: bytes) -> list[Cell]:
    """Re-segment a concatenation of encoded cells."""
    if len(stream) % CELL_SIZE:
        raise CellError(f"stream length {len(stream)} is not a multiple of {CELL_SIZE}")
    return [decode_cell(stream[i : i + CELL_SIZE]) for i in range(0, len(stream), CELL_SIZE)]


def encode_relay(p: RelayPayload) -> bytes:
    header = _RELAY_HDR.pack(int(p.relay_cmd), p.recognized, p.stream_id, p.digest, p.length)
    return header + p.data.ljust(RELAY_DATA_SIZE, b"\0")


def decode_relay(payload: bytes) -> RelayPayload:
    if len(payload) != PAYLOAD_SIZE:
        raise CellError(f"relay payload must be {PAYLOAD_SIZE} bytes, got {len(payload)}")
    code, recognized, stream_id, digest, length = _RELAY_HDR.unpack_from(payload)
    try:
        cmd = RelayCommand(code)
    except ValueError:
        raise CellError(f"unknown relay command {code}") from None
    if length > RELAY_DATA_SIZE:
        raise CellError(f"relay length field exceeds {RELAY_DATA_SIZE}: {length}")
    return RelayPayload(cmd, stream_id, bytes(payload[RELAY_HEADER:]), recognized, digest, length)


def pad_payload(data: bytes) -> bytes:
    if len(data) > PAYLOAD_SIZE:
        raise CellError(f"payload too large: {len(data)} > {PAYLOAD_SIZE}")
    return data.ljust(PAYLOAD_SIZE, b"\0")


# relay command bodies -------------------------------------------------------

RESOLVED_HOSTNAME = 0x00
RESOLVED_IPV4 = 0x04
RESOLVED_ERROR_TRANSIENT = 0xF0
RESOLVED_ERROR = 0xF1


def encode_blob(blob: bytes) -> bytes:
    """CREATE/CREATED/EXTENDED body: u16 length || handshake blob."""
    return struct.pack(">H", len(blob)) + blob


def decode_blob(data: bytes) -> bytes:
    if len(data) < 2:
        raise CellError("truncated handshake blob")
    (n,) = struct.unpack_from(">H", data)
    if 2 + n > len(data):
        raise CellError("truncated handshake blob")
    return bytes(data[2 : 2 + n])


def encode_extend(host: str, port: int, node_id: bytes, blob: bytes) -> bytes:
    h = host.encode()
    if len(h) > 255 or len(node_id) != 20:
        raise CellError("bad extend target")
    return bytes([len(h)]) + h + struct.pack(">H", port) + node_id + encode_blob(blob)


def decode_extend(data: bytes) -> tuple[str, int, bytes, bytes]:
    try:
        n = data[0]
        host = data[1 : 1 + n].decode()
        (port,) = struct.unpack_from(">H", data, 1 + n)
        node_id = bytes(data[3 + n : 23 + n])
        if len(node_id) != 20:
            raise CellError("truncated extend")
        return host, port, node_id, decode_blob(data[23 + n :])
    except (IndexError, struct.error, UnicodeDecodeError):
        raise CellError("malformed extend") from None


def encode_target(host: str, port: int) -> bytes:
    """BEGIN body: ``host:port`` NUL terminated."""
    return f"{host}:{port}".encode() + b"\0"


def decode_target(data: bytes) -> tuple[str, int]:
    text = data.split(b"\0", 1)[0].decode(errors="strict")
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise CellError(f"malformed stream target {text!r}")
    return host, int(port)


def encode_name(name: str) -> bytes:
    return name.encode() + b"\0"


def decode_name(data: bytes) -> str:
    return data.split(b"\0", 1)[0].decode()


def encode_resolved(address: str | None, ttl: int = 60, error: int = RESOLVED_ERROR) -> bytes:
    if address is None:
        return bytes([error, 0]) + struct.pack(">I", 0)
    try:
        packed = socket.inet_aton(address) if address.count(".") == 3 else None
    except OSError:
        packed = None
    if packed is not None:
        return bytes([RESOLVED_IPV4, 4]) + packed + struct.pack(">I", ttl)
    h = address.encode()
    return bytes([RESOLVED_HOSTNAME, len(h)]) + h + struct.pack(">I", ttl)


def decode_resolved(data: bytes) -> tuple[int, str | None]:
    """Returns (type, address); address is None for error answers."""
    if len(data) < 2:
        raise CellError("truncated resolved")
    kind, n = data[0], data[1]
    value = bytes(data[2 : 2 + n])
    if kind == RESOLVED_IPV4 and n == 4:
        return kind, socket.inet_ntoa(value)
    if kind == RESOLVED_HOSTNAME:
        return kind, value.decode()
    return kind, None
