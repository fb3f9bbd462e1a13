"""Gateway configuration: flat ``key = value`` file and deployment config rendering."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from string import Template


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GatewayConfig:
    ssid: str = "Aranea"
    wpa_passphrase: str = "change-me-please"
    interface: str = "wlan0"
    channel: int = 6
    subnet: str = "192.168.50.0/24"
    address: str = "192.168.50.1"
    dhcp_start: str = "192.168.50.10"
    dhcp_end: str = "192.168.50.50"
    lease_time: int = 3600
    dns_port: int = 53
    onion_dns_port: int = 5353
    funnel_port: int = 9040
    directory: str = "10.0.0.100:7000"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 8 <= len(self.wpa_passphrase) <= 63:
            raise ConfigError(f"WPA2 passphrase must be 8-63 characters, got {len(self.wpa_passphrase)}")
        if not all(32 <= ord(c) < 127 for c in self.wpa_passphrase):
            raise ConfigError("WPA2 passphrase must be printable ASCII")
        if not 1 <= len(self.ssid.encode()) <= 32:
            raise ConfigError("SSID must be 1-32 bytes")
        try:
            net = ipaddress.ip_network(self.subnet)
            start, end = ipaddress.ip_address(self.dhcp_start), ipaddress.ip_address(self.dhcp_end)
            gw = ipaddress.ip_address(self.address)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if start not in net or end not in net:
            raise ConfigError(f"DHCP range {start}-{end} is outside subnet {net}")
        if start > end:
            raise ConfigError("DHCP range start is after its end")
        if gw not in net:
            raise ConfigError("gateway address outside subnet")
        if start <= gw <= end:
            raise ConfigError("gateway address inside the DHCP range")
        for port in (self.dns_port, self.onion_dns_port, self.funnel_port):
            if not 0 < port < 65536:
                raise ConfigError(f"bad port {port}")
        if self.lease_time <= 0:
            raise ConfigError("lease_time must be positive")

    @property
    def netmask(self) -> str:
        return str(ipaddress.ip_network(self.subnet).netmask)

    @classmethod
    def parse(cls, text: str) -> GatewayConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if kinds[key] in ("int", int):
                try:
                    value = int(value)
                except ValueError:
                    raise ConfigError(f"line {lineno}: {key} must be an integer") from None
            values[key] = value
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> GatewayConfig:
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _template(name: str) -> Template:
    return Template(resources.files("aranea.gateway").joinpath("templates", name).read_text())


def emit_ap_configs(cfg: GatewayConfig) -> dict[str, str]:
    """Render ``hostapd.conf`` and ``dnsmasq.conf``."""
    cfg.validate()
    values = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    values["netmask"] = cfg.netmask
    return {
        "hostapd.conf": _template("hostapd.conf.tmpl").substitute(values),
        "dnsmasq.conf": _template("dnsmasq.conf.tmpl").substitute(values),
    }
