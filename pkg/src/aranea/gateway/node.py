"""The gateway in software: DHCP, DNS-through-circuit, and the transparent TCP funnel."""

from __future__ import annotations

import logging

from ..client.node import OnionClient
from ..transport import Deferred, Protocol
from . import dhcp, dns
from .config import GatewayConfig

log = logging.getLogger(__name__)


class _Funnel(Protocol):
    """One LAN flow bridged onto a circuit stream."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.stream = None
        self.backlog = bytearray()
        self.conn = None
        self.closed = False
        self.header = gateway.header_mode
        self._hdr = bytearray()

    def connection_made(self, conn):
        self.conn = conn
        if not self.header:
            if conn.original_dst is None:
                conn.close()
                return
            self._open(*conn.original_dst)

    def _open(self, host: str, port: int):
        self.gateway.flows += 1
        d = self.gateway.client.open_stream(host, port)
        d.add_callback(self._opened)

    def _opened(self, d: Deferred):
        if self.closed:
            if not d.error:
                d.result.close()
            return
        if d.error:
            log.info("funnel stream failed: %s", d.error)
            self.gateway.resets += 1
            self.closed = True
            self.conn.close()
            return
        self.stream = d.result
        self.stream.on_data = self.conn.send
        self.stream.on_close = lambda _r: self._remote_closed()
        if self.backlog:
            self.stream.send(bytes(self.backlog))
            self.backlog.clear()

    def _remote_closed(self):
        if not self.closed:
            self.closed = True
            self.conn.close()

    def data_received(self, conn, data):
        if self.header and self.stream is None and self._hdr is not None:
            self._hdr += data
            if b"\n" not in self._hdr:
                return
            line, _, rest = bytes(self._hdr).partition(b"\n")
            self._hdr = None
            try:
                host, _, port = line.decode().strip().rpartition(":")
                port = int(port)
            except (UnicodeDecodeError, ValueError):
                conn.close()
                return
            self.backlog += rest
            self._open(host, port)
            return
        if self.stream is None:
            self.backlog += data
        else:
            self.stream.send(data)

    def connection_lost(self, conn, reason):
        self.closed = True
        if self.stream is not None:
            self.stream.close()


class Gateway:
    """Funnels every LAN flow and DNS query into the embedded onion client.

    ``unsafe_bypass_resolver`` is a test hook that forwards DNS queries
    straight to a WAN resolver; it exists so the leak audit has a negative
    control.
    """

    def __init__(
        self,
        transport,
        cfg: GatewayConfig,
        client: OnionClient,
        unsafe_bypass_resolver: tuple[str, int] | None = None,
        header_mode: bool = False,
    ):
        self.transport = transport
        self.cfg = cfg
        self.client = client
        self.leases = dhcp.LeaseTable(cfg.dhcp_start, cfg.dhcp_end, cfg.lease_time)
        self.bypass = unsafe_bypass_resolver
        self.header_mode = header_mode
        self.flows = 0
        self.resets = 0
        self.dns_answered = 0
        self.dns_failed = 0

    def start(self) -> Gateway:
        t = self.transport
        t.bind_datagram(self.cfg.dns_port, self._on_dns)
        t.bind_datagram(dhcp.DHCP_SERVER_PORT, self._on_dhcp)
        t.listen(self.cfg.funnel_port, self._accept)
        return self

    # dhcp -----------------------------------------------------------------

    def dhcp_offer(self, mac: str) -> dhcp.Lease:
        return self.leases.offer(mac, self.transport.now())

    def _on_dhcp(self, data: bytes, peer: tuple[str, int]) -> None:
        reply = dhcp.handle_message(self.leases, data, self.transport.now())
        self.transport.sendto(peer[0], peer[1], reply, dhcp.DHCP_SERVER_PORT)

    # dns ------------------------------------------------------------------

    def dns_serve(self, query: bytes) -> Deferred:
        """Answer a DNS query through the circuit; resolves to response bytes."""
        out = Deferred()
        try:
            qid, name = dns.parse_query(query)
        except dns.DNSError:
            out.resolve(b"")
            return out
        if self.bypass is not None:
            return self._bypass(query, qid, name)

        def answered(d: Deferred):
            if d.error:
                self.dns_failed += 1
                out.resolve(dns.build_response(qid, name, None, dns.RCODE_SERVFAIL))
            else:
                self.dns_answered += 1
                out.resolve(dns.build_response(qid, name, d.result))

        self.client.resolve(name).add_callback(answered)
        return out

    def _bypass(self, query: bytes, qid: int, name: str) -> Deferred:
        out = Deferred()
        t = self.transport
        port = None

        def on_answer(data, _peer):
            t.unbind_datagram(port)
            out.resolve(data)

        port = t.bind_datagram(None, on_answer)
        t.sendto(self.bypass[0], self.bypass[1], query, port)
        return out

    def _on_dns(self, data: bytes, peer: tuple[str, int]) -> None:
        def reply(d: Deferred):
            if d.result:
                self.transport.sendto(peer[0], peer[1], d.result, self.cfg.dns_port)

        self.dns_serve(data).add_callback(reply)

    # tcp funnel -----------------------------------------------------------

    def _accept(self, conn) -> None:
        conn.handler = _Funnel(self)


class LanDevice:
    """A sim-only LAN host behind the gateway (all egress is redirected to it)."""

    def __init__(self, node, mac: str, gateway_host: str, cfg: GatewayConfig):
        self.node = node
        self.mac = mac
        self.gateway_host = gateway_host
        node.redirect = (gateway_host, cfg.funnel_port, cfg.dns_port)
        self.address: str | None = None
        self._qid = 0x1000

    def dhcp(self) -> Deferred:
        d = Deferred()

        def on_reply(data, _peer):
            self.node.unbind_datagram(dhcp.DHCP_CLIENT_PORT)
            addr = dhcp.parse_reply(data)
            if addr is None:
                d.fail(dhcp.PoolExhausted(data.decode(errors="replace")))
            else:
                self.address = addr
                d.resolve(addr)

        self.node.bind_datagram(dhcp.DHCP_CLIENT_PORT, on_reply)
        self.node.sendto(self.gateway_host, dhcp.DHCP_SERVER_PORT, dhcp.encode_discover(self.mac), dhcp.DHCP_CLIENT_PORT)
        return d

    def resolve(self, name: str, server: str = "8.8.8.8") -> Deferred:
        """Ask ``server`` on port 53; the gateway intercepts it transparently."""
        d = Deferred()
        self._qid += 1
        qid = self._qid
        port = None

        def on_reply(data, _peer):
            self.node.unbind_datagram(port)
            try:
                rqid, rcode, addr = dns.parse_response(data)
            except dns.DNSError as e:
                d.fail(e)
                return
            if rqid != qid or addr is None:
                d.fail(dns.DNSError(f"resolution failed (rcode {rcode})"))
            else:
                d.resolve(addr)

        port = self.node.bind_datagram(None, on_reply)
        self.node.sendto(server, 53, dns.build_query(name, qid), port)
        return d

    def connect(self, host: str, port: int, handler: Protocol):
        return self.node.connect(host, port, handler)


class ResolverService:
    """A plain WAN DNS resolver answering from the sim name table."""

    def __init__(self, node, port: int = 53):
        self.node = node
        self.queries: list[str] = []
        node.bind_datagram(port, self._on_query)
        self.port = port

    def _on_query(self, data, peer):
        try:
            qid, name = dns.parse_query(data)
        except dns.DNSError:
            return
        self.queries.append(name)
        addr = self.node.resolve_name(name)
        rcode = dns.RCODE_OK if addr else dns.RCODE_NXDOMAIN
        self.node.sendto(peer[0], peer[1], dns.build_response(qid, name, addr, rcode), self.port)
