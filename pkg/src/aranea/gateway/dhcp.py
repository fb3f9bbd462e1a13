"""Address leases for LAN devices; a two-message DISCOVER/OFFER exchange."""

from __future__ import annotations

import ipaddress
import threading
from dataclasses import dataclass

DHCP_SERVER_PORT = 67
DHCP_CLIENT_PORT = 68


class PoolExhausted(Exception):
    pass


@dataclass(frozen=True)
class Lease:
    mac: str
    address: str
    expires: float


class LeaseTable:
    def __init__(self, start: str, end: str, lease_time: float = 3600.0):
        self.start = ipaddress.ip_address(start)
        self.end = ipaddress.ip_address(end)
        if self.start > self.end:
            raise ValueError("empty DHCP range")
        self.lease_time = lease_time
        self._by_mac: dict[str, Lease] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._by_mac)

    def leases(self) -> list[Lease]:
        return sorted(self._by_mac.values(), key=lambda l: ipaddress.ip_address(l.address))

    def offer(self, mac: str, now: float) -> Lease:
        mac = mac.lower()
        with self._lock:
            taken = {l.address for m, l in self._by_mac.items() if m != mac and l.expires > now}
            known = self._by_mac.get(mac)
            if known is not None and known.address not in taken:
                lease = Lease(mac, known.address, now + self.lease_time)
                self._by_mac[mac] = lease
                return lease
            addr = self.start
            while addr <= self.end:
                if str(addr) not in taken:
                    # reclaim: expired holders of this address lose it
                    for m, l in list(self._by_mac.items()):
                        if l.address == str(addr) and m != mac:
                            del self._by_mac[m]
                    lease = Lease(mac, str(addr), now + self.lease_time)
                    self._by_mac[mac] = lease
                    return lease
                addr += 1
            raise PoolExhausted(f"no free address in {self.start}-{self.end}")


def encode_discover(mac: str) -> bytes:
    return f"DISCOVER {mac}".encode()


def handle_message(table: LeaseTable, data: bytes, now: float) -> bytes:
    parts = data.decode(errors="replace").split()
    if len(parts) != 2 or parts[0] != "DISCOVER":
        return b"NAK malformed"
    mac = parts[1]
    try:
        lease = table.offer(mac, now)
    except PoolExhausted:
        return f"NAK {mac} exhausted".encode()
    return f"OFFER {mac} {lease.address} {int(table.lease_time)}".encode()


def parse_reply(data: bytes) -> str | None:
    parts = data.decode(errors="replace").split()
    if len(parts) == 4 and parts[0] == "OFFER":
        return parts[2]
    return None
