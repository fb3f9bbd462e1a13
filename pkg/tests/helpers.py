import random

from aranea.directory import EXIT, RelayDescriptor
from aranea.onioncrypt import IdentityKeypair
from aranea.simnet.scenario import parse_scenario


def descriptor(i: int, exit: bool = False, bandwidth: int = 1000, host: str | None = None) -> RelayDescriptor:
    ident = IdentityKeypair.generate(random.Random(f"desc/{i}"))
    return RelayDescriptor(
        node_id=ident.node_id,
        host=host or f"10.0.1.{100 + i}",
        port=9001,
        identity_pub=ident.public,
        flags=frozenset({EXIT}) if exit else frozenset(),
        bandwidth=bandwidth,
    )


def scenario(relays: int = 5, exits=(4, 5), extra: str = "", header: str = "", seed: int = 1):
    """A small inline scenario: directory, relays r1..rN, one client, an echo service."""
    lines = [f"seed = {seed}", "latency_ms = 10", "bandwidth = 1e7", header, "[nodes]", "dir 10.0.0.100 directory"]
    for i in range(1, relays + 1):
        lines.append(f"r{i} 10.0.1.{100 + i} relay{' exit' if i in exits else ''}")
    lines += ["client 10.0.2.201 client", "echo 10.0.3.250 echo", extra, "[names]", "echo.sim 10.0.3.250"]
    return parse_scenario("\n".join(lines))
