"""Scenario files: ``key = value`` header lines followed by table sections.

::

    seed = 7
    latency_ms = 10        # default link, applied to every unlisted WAN pair
    bandwidth = 1e9        # bytes/second
    jitter = 0
    path = r1 r2 r3        # optional pinned circuit for benches

    [nodes]
    # name   host         role      options
    dir      10.0.0.100   directory
    r1       10.0.1.101   relay     exit bandwidth=200000
    client   10.0.2.201   client

    [links]
    # a      b     latency_ms  bandwidth  jitter
    client   r1    50          1e9        0

    [names]
    echo.sim 10.0.3.250
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .engine import LinkParams

ROLES = frozenset(
    {"directory", "relay", "client", "echo", "source", "web", "gateway", "device", "resolver", "prober", "colluder", "host"}
)


class ScenarioError(ValueError):
    pass


@dataclass
class NodeSpec:
    name: str
    host: str
    role: str
    exit: bool = False
    bandwidth: float | None = None
    wan: bool = True
    options: dict = field(default_factory=dict)


@dataclass
class LinkSpec:
    a: str
    b: str
    latency: float
    bandwidth: float
    jitter: float = 0.0


@dataclass
class SimConfig:
    seed: int = 0
    default_link: LinkParams | None = field(default_factory=lambda: LinkParams(0.010, 1e9, 0.0))
    nodes: list[NodeSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)
    names: dict[str, str] = field(default_factory=dict)
    settings: dict[str, str] = field(default_factory=dict)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name or n.host == name:
                return n
        raise ScenarioError(f"unknown node {name!r}")

    def by_role(self, role: str) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role == role]

    def validate(self) -> None:
        names = [n.name for n in self.nodes]
        hosts = [n.host for n in self.nodes]
        if len(set(names)) != len(names) or len(set(hosts)) != len(hosts):
            raise ScenarioError("duplicate node name or host")
        for n in self.nodes:
            if n.role not in ROLES:
                raise ScenarioError(f"unknown role {n.role!r} for node {n.name}")
        for link in self.links:
            self.node(link.a)
            self.node(link.b)
            LinkParams(link.latency, link.bandwidth, link.jitter)
        if len(self.by_role("directory")) > 1:
            raise ScenarioError("at most one directory node is supported")

    def with_seed(self, seed: int) -> SimConfig:
        return SimConfig(seed, self.default_link, list(self.nodes), list(self.links), dict(self.names), dict(self.settings))


def _num(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ScenarioError(f"not a number: {text!r}") from None


def parse_scenario(text: str) -> SimConfig:
    cfg = SimConfig()
    header: dict[str, str] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("nodes", "links", "names"):
                raise ScenarioError(f"line {lineno}: unknown section [{section}]")
            continue
        if section is None:
            key, sep, value = line.partition("=")
            if not sep:
                raise ScenarioError(f"line {lineno}: expected key = value")
            header[key.strip()] = value.strip()
            continue
        cols = line.split()
        try:
            if section == "nodes":
                name, host, role, *opts = cols
                spec = NodeSpec(name, host, role)
                for opt in opts:
                    if opt == "exit":
                        spec.exit = True
                    elif opt == "lan":
                        spec.wan = False
                    elif opt.startswith("bandwidth="):
                        spec.bandwidth = _num(opt.split("=", 1)[1])
                    elif "=" in opt:
                        k, v = opt.split("=", 1)
                        spec.options[k] = v
                    else:
                        raise ScenarioError(f"line {lineno}: unknown node option {opt!r}")
                cfg.nodes.append(spec)
            elif section == "links":
                a, b, lat, bw, *rest = cols
                cfg.links.append(LinkSpec(a, b, _num(lat) / 1000.0, _num(bw), _num(rest[0]) if rest else 0.0))
            else:
                name, host = cols
                cfg.names[name] = host
        except ValueError as e:
            if isinstance(e, ScenarioError):
                raise
            raise ScenarioError(f"line {lineno}: wrong number of columns in [{section}]") from None
    cfg.seed = int(header.pop("seed", "0"))
    if header.get("default_link", "yes") == "no":
        cfg.default_link = None
        header.pop("default_link")
    else:
        header.pop("default_link", None)
        cfg.default_link = LinkParams(
            _num(header.pop("latency_ms", "10")) / 1000.0,
            _num(header.pop("bandwidth", "1e9")),
            _num(header.pop("jitter", "0")),
        )
    cfg.settings = header
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> SimConfig:
    return parse_scenario(Path(path).read_text())


def load_preset(name: str) -> SimConfig:
    from importlib import resources

    text = resources.files("aranea.scenarios").joinpath(f"{name}.scn").read_text()
    return parse_scenario(text)
