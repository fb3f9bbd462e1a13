"""Minimal DNS message codec (single question, A records) and a leak heuristic."""

from __future__ import annotations

import socket
import struct

QTYPE_A = 1
QCLASS_IN = 1
RCODE_OK, RCODE_SERVFAIL, RCODE_NXDOMAIN = 0, 2, 3

_HDR = struct.Struct(">HHHHHH")


class DNSError(ValueError):
    pass


def _encode_name(name: str) -> bytes:
    out = b""
    for label in name.rstrip(".").split("."):
        b = label.encode("idna") if label else b""
        if not 0 < len(b) < 64:
            raise DNSError(f"bad label in {name!r}")
        out += bytes([len(b)]) + b
    return out + b"\0"


def _decode_name(data: bytes, offset: int) -> tuple[str, int]:
    labels = []
    while True:
        if offset >= len(data):
            raise DNSError("truncated name")
        n = data[offset]
        offset += 1
        if n == 0:
            break
        if n >= 64 or offset + n > len(data):
            raise DNSError("bad label")
        labels.append(data[offset : offset + n].decode("ascii"))
        offset += n
    if not labels:
        raise DNSError("empty name")
    return ".".join(labels), offset


def build_query(name: str, qid: int) -> bytes:
    return _HDR.pack(qid, 0x0100, 1, 0, 0, 0) + _encode_name(name) + struct.pack(">HH", QTYPE_A, QCLASS_IN)


def parse_query(data: bytes) -> tuple[int, str]:
    if len(data) < _HDR.size + 5:
        raise DNSError("short message")
    qid, flags, qd, an, ns, ar = _HDR.unpack_from(data)
    if flags & 0x8000 or (flags >> 11) & 0xF or qd != 1 or an or ns:
        raise DNSError("not a standard query")
    name, off = _decode_name(data, _HDR.size)
    if off + 4 > len(data):
        raise DNSError("truncated question")
    return qid, name


def build_response(qid: int, name: str, address: str | None, rcode: int = RCODE_OK) -> bytes:
    question = _encode_name(name) + struct.pack(">HH", QTYPE_A, QCLASS_IN)
    if address is None:
        rcode = rcode or RCODE_SERVFAIL
        return _HDR.pack(qid, 0x8180 | rcode, 1, 0, 0, 0) + question
    answer = b"\xc0\x0c" + struct.pack(">HHIH", QTYPE_A, QCLASS_IN, 60, 4) + socket.inet_aton(address)
    return _HDR.pack(qid, 0x8180, 1, 1, 0, 0) + question + answer


def parse_response(data: bytes) -> tuple[int, int, str | None]:
    """Returns (qid, rcode, address or None)."""
    if len(data) < _HDR.size:
        raise DNSError("short message")
    qid, flags, qd, an, _ns, _ar = _HDR.unpack_from(data)
    if not flags & 0x8000:
        raise DNSError("not a response")
    rcode = flags & 0xF
    off = _HDR.size
    for _ in range(qd):
        _, off = _decode_name(data, off)
        off += 4
    if an and rcode == RCODE_OK and len(data) >= off + 16:
        return qid, rcode, socket.inet_ntoa(data[off + 12 : off + 16])
    return qid, rcode, None


def looks_like_dns(payload: bytes, sport: int = 0, dport: int = 0) -> bool:
    """Port 53 traffic, or a payload that parses cleanly as a DNS message."""
    if sport == 53 or dport == 53:
        return True
    if len(payload) < _HDR.size + 5:
        return False
    try:
        _qid, flags, qd, an, ns, ar = _HDR.unpack_from(payload)
        if qd != 1 or (flags >> 11) & 0xF or ns or ar or an > 8:
            return False
        _name, off = _decode_name(payload, _HDR.size)
        qtype, qclass = struct.unpack_from(">HH", payload, off)
        return qclass == QCLASS_IN and 0 < qtype < 256
    except (DNSError, struct.error, UnicodeDecodeError):
        return False
