"""Assemble a simulated deployment (directory, relays, clients, services) from a SimConfig."""

from __future__ import annotations

from .client.node import ClientConfig, OnionClient
from .directory import DEFAULT_PORT as DIR_PORT
from .directory import DirectoryServer
from .relay import DEFAULT_OR_PORT, Relay
from .services import ECHO_PORT, SOURCE_PORT, WEB_PORT, Echo, Source, WebObject, serve
from .simnet import SimNet
from .simnet.scenario import SimConfig

SERVICES = {"echo": (ECHO_PORT, Echo), "source": (SOURCE_PORT, Source), "web": (WEB_PORT, WebObject)}


class World:
    def __init__(self, cfg: SimConfig, record_events: bool = False, rotation: float | None = None):
        self.cfg = cfg
        self.net = SimNet(cfg.seed, cfg.default_link, record_events)
        for spec in cfg.nodes:
            self.net.add_node(spec.host, bandwidth=spec.bandwidth, wan=spec.wan)
        for link in cfg.links:
            self.net.add_link(self.host(link.a), self.host(link.b), link.latency, link.bandwidth, link.jitter)
        for name, host in cfg.names.items():
            self.net.register_name(name, self.host(host) if not _is_ip(host) else host)

        dirs = cfg.by_role("directory")
        self.directory_addr = (dirs[0].host, DIR_PORT) if dirs else None
        self.directory = DirectoryServer(self.net.nodes[dirs[0].host], DIR_PORT) if dirs else None

        self.relays: dict[str, Relay] = {}
        for spec in cfg.by_role("relay"):
            adv = int(spec.options.get("advertised", spec.bandwidth or 1_000_000))
            self.relays[spec.name] = Relay(
                self.net.nodes[spec.host],
                spec.host,
                DEFAULT_OR_PORT,
                is_exit=spec.exit,
                bandwidth=adv,
                seed=cfg.seed,
                directory_addr=self.directory_addr,
            )
        for role, (port, factory) in SERVICES.items():
            for spec in cfg.by_role(role):
                serve(self.net.nodes[spec.host], port, factory)

        period = rotation if rotation is not None else float(cfg.settings.get("rotation", 600))
        self.clients: dict[str, OnionClient] = {}
        for spec in cfg.by_role("client"):
            self.clients[spec.name] = OnionClient(
                self.net.nodes[spec.host],
                ClientConfig(directory=self.directory_addr, rotation_period=period, seed=cfg.seed),
                name=spec.name,
            )
        self.started = False

    def host(self, name: str) -> str:
        return self.cfg.node(name).host

    def node(self, name: str):
        return self.net.nodes[self.host(name)]

    def relay_by_host(self, host: str) -> Relay:
        for r in self.relays.values():
            if r.host == host:
                return r
        raise KeyError(host)

    @property
    def client(self) -> OnionClient:
        return next(iter(self.clients.values()))

    def start(self) -> World:
        """Start relays and wait for every descriptor to be published."""
        for relay in self.relays.values():
            relay.start()
        for relay in self.relays.values():
            if relay.published is not None:
                self.net.wait(relay.published, timeout=30)
        self.started = True
        return self

    def wait(self, d, timeout: float = 60.0):
        return self.net.wait(d, timeout)

    def pinned_path(self):
        """Descriptors for the scenario's ``path = a b c`` setting, or None."""
        names = self.cfg.settings.get("path")
        if not names:
            return None
        return [self.relays[n].descriptor() for n in names.split()]


def _is_ip(text: str) -> bool:
    parts = text.split(".")
    return len(parts) == 4 and all(p.isdigit() for p in parts)
