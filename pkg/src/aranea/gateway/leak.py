"""Offline audit of gateway taps for DNS leaks and direct destination contact."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

from ..simnet import Tap
from .dns import looks_like_dns


@dataclass
class LeakRecord:
    t: float
    link: str
    src: str
    dst: str
    dport: int
    kind: str
    why: str


@dataclass
class LeakReport:
    run_id: str
    links_audited: int = 0
    circuit_links: int = 0
    records_scanned: int = 0
    dns_leaks: int = 0
    dns_leak_records: list[LeakRecord] = field(default_factory=list)
    direct_contacts: int = 0
    direct_contact_records: list[LeakRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def leaked(self) -> bool:
        return self.dns_leaks + self.direct_contacts > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["leaked"] = self.leaked
        return d


def leak_audit(
    taps: Iterable[Tap],
    gateway_host: str,
    lan_hosts: set[str],
    circuit_peers: set[tuple[str, int]],
    destinations: set[str],
    run_id: str = "run",
) -> LeakReport:
    """Scan every WAN-side link of the gateway.

    Non-circuit links are checked for DNS-shaped payloads. Every WAN link is
    checked for packets to or from a session destination, and for the
    destination's name or address appearing in cleartext.
    """
    report = LeakReport(run_id)
    taps = list(taps)
    if not taps:
        report.warnings.append("no taps supplied; audit is vacuous")
        return report
    needles = [d.encode() for d in destinations if d]
    links: dict[str, bool] = {}
    for tap in taps:
        for rec in tap.records:
            if gateway_host not in (rec.src, rec.dst):
                continue
            peer, pport = (rec.dst, rec.dport) if rec.src == gateway_host else (rec.src, rec.sport)
            if peer in lan_hosts:
                continue
            is_circuit = (peer, pport) in circuit_peers
            link = f"{gateway_host}<->{peer}"
            links[link] = links.get(link, False) or is_circuit
            report.records_scanned += 1

            def flag(why):
                return LeakRecord(rec.t, link, rec.src, rec.dst, rec.dport, rec.kind, why)

            if peer in destinations:
                report.direct_contact_records.append(flag("packet exchanged with destination"))
            elif any(n in rec.payload for n in needles):
                report.direct_contact_records.append(flag("destination visible in cleartext"))
            if not is_circuit and looks_like_dns(rec.payload, rec.sport, rec.dport):
                report.dns_leak_records.append(flag("DNS-shaped payload on non-circuit link"))
    report.links_audited = len(links)
    report.circuit_links = sum(links.values())
    report.dns_leaks = len(report.dns_leak_records)
    report.direct_contacts = len(report.direct_contact_records)
    if not links:
        report.warnings.append("taps saw no WAN-side traffic")
    return report
