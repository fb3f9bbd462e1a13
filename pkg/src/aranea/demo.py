"""End-to-end echo over a 5-relay simulated network, with a knowledge-isolation audit."""

from __future__ import annotations

from .services import ECHO_PORT
from .simnet.scenario import SimConfig, load_preset
from .world import World

MESSAGE = b"aranea demo: ping through three hops"


def isolation_audit(world: World, path_hosts: list[str], client_host: str, dest: list[str]) -> dict:
    """Exact string scan of each hop's audit log for addresses it should never learn."""
    roles = ("entry", "middle", "exit")
    forbidden = {
        "entry": list(dest),
        "middle": [client_host, *dest],
        "exit": [client_host],
    }
    out = {}
    for role, host in zip(roles, path_hosts):
        text = world.relay_by_host(host).audit.text()
        leaks = [needle for needle in forbidden[role] if needle in text]
        peers = sorted({p for rec in world.relay_by_host(host).audit.records for p in rec.peers})
        out[role] = {"relay": host, "peers_seen": peers, "forbidden": forbidden[role], "violations": leaks}
    return out


def run_demo(cfg: SimConfig | None = None, target: str = "echo.sim") -> dict:
    cfg = cfg or load_preset("demo")
    world = World(cfg).start()
    net = world.net
    client = world.client
    client_host = client.transport.host
    stream = net.wait(client.open_stream(target, ECHO_PORT), timeout=60)
    stream.send(MESSAGE)
    net.run_for(5)
    echoed = bytes(stream.received)
    path = [d.host for d in stream.circuit.path]
    stream.close()
    net.run_for(1)
    dest = [target]
    resolved = net.resolve_name(target)
    if resolved:
        dest.append(resolved)
    audit = isolation_audit(world, path, client_host, dest)
    return {
        "seed": cfg.seed,
        "relays": len(world.relays),
        "path": path,
        "echo_ok": echoed == MESSAGE,
        "bytes_echoed": len(echoed),
        "isolation": audit,
        "isolated": all(not v["violations"] for v in audit.values()),
    }


def format_demo(report: dict) -> str:
    lines = [
        f"relays: {report['relays']}",
        f"circuit: {' -> '.join(report['path'])}",
        f"echo: {'ok' if report['echo_ok'] else 'FAILED'} ({report['bytes_echoed']} bytes)",
        "knowledge isolation:",
    ]
    for role, v in report["isolation"].items():
        status = "ok" if not v["violations"] else "LEAK " + ", ".join(v["violations"])
        lines.append(f"  {role:<6} {v['relay']:<12} saw {', '.join(v['peers_seen'])}  [{status}]")
    return "\n".join(lines)
