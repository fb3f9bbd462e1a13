"""Latency and throughput measurements, direct versus through a 3-hop circuit."""

from __future__ import annotations

import statistics
import struct
from dataclasses import asdict, dataclass, field

from .cells import CELL_SIZE
from .relay import DEFAULT_OR_PORT
from .services import ECHO_PORT, SOURCE_PORT
from .simnet import MSS, SimNet
from .simnet.scenario import SimConfig
from .transport import Deferred, Protocol
from .world import World

PING_SIZE = 64
MIN_SAMPLES = 30
QUALITATIVE_RATIO = 3.0


class BenchError(Exception):
    pass


def rtt_stats(samples: list[float]) -> dict:
    if not samples:
        return {"n": 0, "mean": 0.0, "median": 0.0, "min": 0.0, "max": 0.0, "stdev": 0.0}
    return {
        "n": len(samples),
        "mean": round(statistics.fmean(samples), 9),
        "median": round(statistics.median(samples), 9),
        "min": round(min(samples), 9),
        "max": round(max(samples), 9),
        "stdev": round(statistics.pstdev(samples), 9),
    }


@dataclass
class BenchReport:
    scenario: str
    seed: int
    kind: str
    path: list[str] = field(default_factory=list)
    direct_rtt: dict = field(default_factory=dict)
    circuit_rtt: dict = field(default_factory=dict)
    latency_ratio: float | None = None
    oracle: dict = field(default_factory=dict)
    transfer_bytes: int = 0
    bottleneck_bandwidth: float = 0.0
    throughput_direct: float = 0.0
    throughput_circuit: float = 0.0
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _link_params(cfg: SimConfig, net: SimNet, a: str, b: str):
    link = net.link(a, b)
    if link is None:
        raise BenchError(f"scenario has no link {a} - {b}")
    return link.params


def link_sum_rtt(net: SimNet, hops: list[str], sizes: list[int]) -> float:
    """Closed-form RTT over consecutive hosts with per-link message sizes, both ways."""
    total = 0.0
    for (a, b), size in zip(zip(hops, hops[1:]), sizes):
        p = net.link(a, b).params
        total += 2 * (p.latency + size / p.bandwidth)
    return total


class _Collector(Protocol):
    """Counts bytes arriving on a raw connection and resolves waiters."""

    def __init__(self):
        self.opened = Deferred()
        self.received = 0
        self.waiting: tuple[int, Deferred] | None = None
        self.first_at = None
        self.now = None

    def connection_made(self, conn):
        self.opened.resolve(conn)

    def data_received(self, conn, data):
        self.received += len(data)
        self._check()

    def connection_lost(self, conn, reason):
        self.opened.fail(BenchError(f"direct connection failed: {reason}"))

    def expect(self, total: int) -> Deferred:
        d = Deferred()
        self.waiting = (total, d)
        self._check()
        return d

    def _check(self):
        if self.waiting and self.received >= self.waiting[0]:
            d = self.waiting[1]
            self.waiting = None
            d.resolve(self.received)


def _stream_collector(stream) -> _Collector:
    col = _Collector()

    def on_data(data):
        col.received += len(data)
        col._check()

    stream.on_data = on_data
    return col


def _ping_loop(net: SimNet, send, col: _Collector, samples: int) -> list[float]:
    out = []
    payload = bytes(PING_SIZE)
    for _ in range(samples):
        t0 = net.now
        target = col.received + PING_SIZE
        send(payload)
        net.wait(col.expect(target), timeout=60)
        out.append(net.now - t0)
    return out


def _open_circuit_stream(world: World, host: str, port: int):
    client = world.client
    path = world.pinned_path()
    try:
        if path is not None:
            circ = client.build_circuit(path)
            world.wait(circ.built, timeout=60)
            client.current = circ
        stream = world.wait(client.open_stream(host, port), timeout=60)
    except Exception as e:
        raise BenchError(f"circuit setup failed: {e}") from e
    return stream


def _direct_target(cfg: SimConfig, role: str) -> str:
    nodes = cfg.by_role(role)
    if not nodes:
        raise BenchError(f"scenario needs a {role} node")
    return nodes[0].host


def bench_latency(cfg: SimConfig, samples: int = MIN_SAMPLES, scenario_name: str = "inline") -> BenchReport:
    if samples < MIN_SAMPLES:
        raise BenchError(f"need at least {MIN_SAMPLES} samples")
    world = World(cfg).start()
    net = world.net
    client_host = world.client.transport.host
    echo_host = _direct_target(cfg, "echo")

    col = _Collector()
    conn = client_node = world.net.nodes[client_host]
    conn = client_node.connect(echo_host, ECHO_PORT, col)
    net.wait(col.opened, timeout=60)
    direct = _ping_loop(net, conn.send, col, samples)
    conn.close()

    stream = _open_circuit_stream(world, echo_host, ECHO_PORT)
    scol = _stream_collector(stream)
    circuit = _ping_loop(net, stream.send, scol, samples)
    path = [d.host for d in stream.circuit.path]
    stream.close()

    report = BenchReport(scenario_name, cfg.seed, "latency", path=path)
    report.direct_rtt = rtt_stats(direct)
    report.circuit_rtt = rtt_stats(circuit)
    dmean, cmean = statistics.fmean(direct), statistics.fmean(circuit)
    report.latency_ratio = round(cmean / dmean, 9) if dmean > 0 else None

    hops = [client_host, *path, echo_host]
    oracle_circuit = link_sum_rtt(net, hops, [CELL_SIZE] * 3 + [PING_SIZE])
    oracle_direct = link_sum_rtt(net, [client_host, echo_host], [PING_SIZE])
    report.oracle = {
        "direct_rtt": round(oracle_direct, 9),
        "circuit_rtt": round(oracle_circuit, 9),
        "ratio": round(oracle_circuit / oracle_direct, 9) if oracle_direct > 0 else None,
    }
    latencies = [net.link(a, b).params.latency for a, b in zip(hops, hops[1:])]
    latencies.append(net.link(client_host, echo_host).params.latency)
    jitter = any(net.link(a, b).params.jitter for a, b in zip(hops, hops[1:]))
    report.flags = {
        "degenerate": max(latencies) == 0.0,
        "jitter": jitter,
        "oracle_within_1pct": abs(cmean - oracle_circuit) <= 0.01 * oracle_circuit if not jitter else None,
        "ratio_at_least_3": report.latency_ratio is not None and report.latency_ratio >= QUALITATIVE_RATIO,
    }
    return report


def bench_throughput(cfg: SimConfig, transfer_bytes: int = 10_000_000, scenario_name: str = "inline") -> BenchReport:
    world = World(cfg).start()
    net = world.net
    client_host = world.client.transport.host
    src_host = _direct_target(cfg, "source")
    request = struct.pack(">Q", transfer_bytes)

    col = _Collector()
    conn = world.net.nodes[client_host].connect(src_host, SOURCE_PORT, col)
    net.wait(col.opened, timeout=60)
    t0 = net.now
    conn.send(request)
    if transfer_bytes:
        net.wait(col.expect(transfer_bytes), timeout=1e6)
    direct_time = net.now - t0
    conn.close()

    stream = _open_circuit_stream(world, src_host, SOURCE_PORT)
    scol = _stream_collector(stream)
    t0 = net.now
    stream.send(request)
    if transfer_bytes:
        net.wait(scol.expect(transfer_bytes), timeout=1e6)
    circuit_time = net.now - t0
    path = [d.host for d in stream.circuit.path]
    stream.close()

    hops = [client_host, *path, src_host]
    bottleneck = min(net.link(a, b).params.bandwidth for a, b in zip(hops, hops[1:]))
    report = BenchReport(scenario_name, cfg.seed, "throughput", path=path, transfer_bytes=transfer_bytes)
    report.bottleneck_bandwidth = bottleneck
    report.throughput_direct = round(transfer_bytes / direct_time, 6) if transfer_bytes else 0.0
    report.throughput_circuit = round(transfer_bytes / circuit_time, 6) if transfer_bytes else 0.0
    frac = report.throughput_circuit / bottleneck if bottleneck else 0.0
    report.flags = {
        "circuit_within_bottleneck_bounds": 0.8 <= frac <= 1.0 if transfer_bytes else None,
        "direct_ge_circuit": report.throughput_direct >= report.throughput_circuit,
        "circuit_fraction_of_bottleneck": round(frac, 6),
        "segment_size": MSS,
    }
    return report
