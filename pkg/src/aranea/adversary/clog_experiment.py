"""Simulated clogging experiment: victim session, background load, and ground-truth scoring.

This harness is the only place that reads the victim's circuit, and only after
the attack has produced its ranking.
"""

from __future__ import annotations

import struct

from ..client.node import ClientConfig, OnionClient
from ..services import SOURCE_PORT
from ..simnet.scenario import SimConfig, load_preset
from ..transport import Deferred
from ..world import World
from .clogging import ClogAttack, ModulationPattern, colluding_factory
from .report import AttackReport

COLLUDER_PORT = 8080


class BackgroundLoad:
    """A client pulling bursts from a source service with exponential on/off periods."""

    def __init__(self, net, client: OnionClient, source: str, rate: float, on_mean: float, off_mean: float, rng, tick=0.05):
        self.net, self.client = net, client
        self.source = source
        self.chunk = int(rate * tick)
        self.on_mean, self.off_mean = on_mean, off_mean
        self.rng = rng
        self.tick = tick
        self.stream = None
        self.until = 0.0

    def start(self, until: float) -> Deferred:
        self.until = until
        d = self.client.open_stream(self.source, SOURCE_PORT)
        d.add_callback(self._opened)
        return d

    def _opened(self, d: Deferred):
        if d.error:
            return
        self.stream = d.result
        self._burst_off()

    def _burst_on(self):
        end = self.net.now + self.rng.expovariate(1 / self.on_mean)
        self._tick(end)

    def _tick(self, end: float):
        now = self.net.now
        if now >= self.until or self.stream is None:
            return
        if now >= end:
            self._burst_off()
            return
        if self.chunk > 0:
            self.stream.send(struct.pack(">Q", self.chunk))
        self.net.call_later(self.tick, lambda: self._tick(end))

    def _burst_off(self):
        if self.net.now < self.until:
            self.net.call_later(self.rng.expovariate(1 / self.off_mean), self._burst_on)


def pattern_from(settings: dict, on_rate: float | None = None) -> ModulationPattern:
    return ModulationPattern(
        on_duration=float(settings.get("on_duration", 1.0)),
        off_duration=float(settings.get("off_duration", 1.0)),
        cycles=int(settings.get("cycles", 8)),
        on_rate=float(settings.get("on_rate", 0)) if on_rate is None else on_rate,
        tick=float(settings.get("tick", 0.01)),
    )


def clog_run(
    cfg: SimConfig | None = None,
    seed: int | None = None,
    on_rate: float | None = None,
    bg_rate: float | None = None,
    exclude_true: bool = False,
    scenario_name: str = "clog",
) -> AttackReport:
    """One seeded run. ``exclude_true`` drops the victim's relays from the candidate set."""
    cfg = cfg or load_preset("clog")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    s = cfg.settings
    pattern = pattern_from(s, on_rate)
    interval = float(s.get("interval", 0.05))
    lead = float(s.get("lead", 1.0))
    bg_rate = float(s.get("bg_rate", 0)) if bg_rate is None else bg_rate

    world = World(cfg).start()
    net = world.net
    victim = world.client
    servers: list = []
    colluder = cfg.by_role("colluder")[0].host
    net.nodes[colluder].listen(
        COLLUDER_PORT, lambda conn: setattr(conn, "handler", colluding_factory(net.nodes[colluder], pattern, lead, servers)())
    )

    sources = [n.host for n in cfg.by_role("source")]
    horizon = 1.0 + lead + pattern.duration + 10 * interval
    loads = []
    for i, (name, client) in enumerate(list(world.clients.items())[1:]):
        load = BackgroundLoad(
            net, client, sources[i % len(sources)], bg_rate,
            float(s.get("bg_on_mean", 0.5)), float(s.get("bg_off_mean", 0.5)), net.rng(f"background/{name}"),
            tick=float(s.get("bg_tick", 0.05)),
        )
        loads.append(load.start(horizon + net.now))

    prober_node = net.nodes[cfg.by_role("prober")[0].host]
    prober = OnionClient(prober_node, ClientConfig(directory=world.directory_addr, seed=cfg.seed), name="prober")

    # the victim's stream is up and idle before the attacker starts probing
    stream = net.wait(victim.open_stream(colluder, COLLUDER_PORT), timeout=60)
    truth = [d.node_id.hex() for d in stream.circuit.path]

    consensus = net.wait(prober.fetch_consensus(), timeout=60)
    candidates = [d.node_id for d in consensus.relays]
    if exclude_true:
        candidates = [c for c in candidates if c.hex() not in truth]
    attack = ClogAttack(net, prober, candidates, pattern, interval)
    attack.setup()

    stream.send(b"GET /\r\n")
    start = net.wait(servers[0].started, timeout=60) if servers else None
    if start is None:
        start = net.now
    result = attack.run(start)
    stream.close()

    top = result.ranking[:3]
    true_ranks = sorted(result.ranking.index(t) + 1 for t in truth if t in result.ranking)
    report = AttackReport(
        kind="clog",
        seed=cfg.seed,
        params={
            "scenario": scenario_name,
            "on_duration": pattern.on_duration,
            "off_duration": pattern.off_duration,
            "cycles": pattern.cycles,
            "on_rate": pattern.on_rate,
            "interval": interval,
            "bg_rate": bg_rate,
            "candidates": len(candidates),
            "exclude_true": exclude_true,
        },
        scores=result.scores,
        ranking=result.ranking,
        warnings=result.warnings,
    )
    report.verdict = {
        "true_relays": truth,
        "true_ranks": true_ranks,
        "true_in_top3": (not exclude_true) and set(truth) <= set(top),
        "top_score": result.scores[result.ranking[0]] if result.ranking else 0.0,
        "true_scores": [result.scores[t] for t in truth if t in result.scores],
        "other_scores": [result.scores[k] for k in result.ranking if k not in truth],
        "unmeasured": result.unmeasured,
        "probe_samples": {k: len(v.samples) for k, v in result.series.items()},
    }
    return report
