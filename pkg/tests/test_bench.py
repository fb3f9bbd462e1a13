import pytest

from aranea.bench import BenchError, bench_latency, bench_throughput, rtt_stats
from aranea.simnet.scenario import load_preset, parse_scenario
from importlib import resources

L = 0.010


def _preset_text(name):
    return resources.files("aranea.scenarios").joinpath(f"{name}.scn").read_text()


def test_uniform_ratio_four():
    rep = bench_latency(load_preset("latency"))
    # hand oracle: 4 links each way through the circuit, 1 link direct
    assert rep.circuit_rtt["mean"] == pytest.approx(8 * L, rel=0.01)
    assert rep.direct_rtt["mean"] == pytest.approx(2 * L, rel=0.01)
    assert rep.latency_ratio == pytest.approx(4.0, abs=0.1)
    assert rep.flags["ratio_at_least_3"] and rep.flags["oracle_within_1pct"]
    assert rep.direct_rtt["n"] >= 30 and rep.circuit_rtt["n"] >= 30


def test_hetero_ratio_eight():
    rep = bench_latency(load_preset("latency_hetero"))
    oracle = 2 * (5 * L + 3 * L) / (2 * L)
    assert oracle == 8.0
    assert rep.latency_ratio == pytest.approx(oracle, rel=0.01)
    assert rep.circuit_rtt["mean"] == pytest.approx(2 * (5 * L + 3 * L), rel=0.01)


def test_zero_latency_flagged_degenerate():
    text = _preset_text("latency").replace("latency_ms = 10", "latency_ms = 0")
    rep = bench_latency(parse_scenario(text))
    assert rep.flags["degenerate"] is True
    assert rep.circuit_rtt["mean"] > 0


def test_too_few_samples():
    with pytest.raises(BenchError):
        bench_latency(load_preset("latency"), samples=10)


def test_throughput_bounds():
    rep = bench_throughput(load_preset("throughput"), 2_000_000)
    assert rep.bottleneck_bandwidth == 1e6
    assert 0.8 * 1e6 <= rep.throughput_circuit <= 1e6
    assert rep.throughput_direct >= rep.throughput_circuit


def test_zero_byte_transfer():
    rep = bench_throughput(load_preset("throughput"), 0)
    assert rep.transfer_bytes == 0 and rep.throughput_circuit == 0.0 and rep.throughput_direct == 0.0


def test_rtt_stats_empty_and_basic():
    assert rtt_stats([])["n"] == 0
    s = rtt_stats([1.0, 2.0, 3.0])
    assert s["mean"] == 2.0 and s["median"] == 2.0 and s["min"] == 1.0 and s["max"] == 3.0
