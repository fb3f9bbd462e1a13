import ast
import inspect
import json
import math
import random
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from aranea import adversary
from aranea.adversary import (
    AttackReport,
    ClogAttack,
    FeatureVector,
    ModulationPattern,
    ProbeSeries,
    WFModel,
    correlation_score,
    extract_features,
    probe_relay,
    wf_classify,
    wf_train,
)
from aranea.adversary.fingerprint import DIMENSION, feature_names
from aranea.adversary.wf_experiment import make_sites, wf_evaluate
from aranea.client import ClientConfig, OnionClient
from aranea.services import SOURCE_PORT
from aranea.simnet.trace import TrafficTrace
from aranea.world import World
from helpers import scenario

# features ------------------------------------------------------------------


def test_empty_trace_zero_vector():
    assert extract_features(TrafficTrace()).values == (0.0,) * DIMENSION
    assert len(feature_names()) == DIMENSION == 114


def test_single_record():
    f = extract_features(TrafficTrace([(0, 1, 512)])).named()
    assert f["up_cells"] == 1 and f["up_bytes"] == 512
    # the sequence entry is the record itself, signed by direction
    assert f["seq0"] == 512
    rest = {k: v for k, v in f.items() if k not in ("up_cells", "up_bytes", "seq0")}
    assert all(v == 0 for v in rest.values())


def _oracle_features(records):
    """Straight re-derivation with plain Python and the statistics module."""
    import statistics

    up = [r for r in records if r[1] == 1]
    down = [r for r in records if r[1] == -1]
    seq = [d * n for _, d, n in records[:100]] + [0] * max(0, 100 - len(records))

    def gaps(rs):
        ts = [t / 1e6 for t, _, _ in rs]
        g = [b - a for a, b in zip(ts, ts[1:])]
        if not g:
            return [0.0] * 5
        q = np.percentile(g, [25, 50, 75])
        return [statistics.fmean(g), statistics.pvariance(g), *q]

    return [len(up), len(down), sum(r[2] for r in up), sum(r[2] for r in down), *seq, *gaps(up), *gaps(down)]


records_st = st.lists(st.tuples(st.integers(0, 10**7), st.sampled_from([1, -1]), st.integers(1, 600)), max_size=150)


@settings(max_examples=60, deadline=None)
@given(records_st)
def test_features_match_oracle(rows):
    rows = sorted(rows)
    got = extract_features(TrafficTrace(rows)).values
    assert np.allclose(got, _oracle_features(rows), rtol=1e-9, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(records_st, st.integers(-10**6, 10**9))
def test_features_shift_invariant(rows, delta):
    rows = sorted(rows)
    base = TrafficTrace(rows)
    shifted = base.shifted(delta)
    assert np.allclose(extract_features(base).values, extract_features(shifted).values, rtol=1e-9, atol=1e-12)


def test_feature_vector_dimension_checked():
    with pytest.raises(ValueError):
        FeatureVector((0.0,) * 3)


# k-NN ----------------------------------------------------------------------


def _trace(seed, n=20):
    rng = random.Random(seed)
    t, rows = 0, []
    for _ in range(n):
        t += rng.randint(100, 5000)
        rows.append((t, rng.choice([1, -1]), rng.randint(1, 512)))
    return TrafficTrace(rows)


def test_identity_distance_zero():
    examples = [(_trace(i), f"site{i}") for i in range(5)]
    model = wf_train(examples, k=1)
    for tr, label in examples:
        assert wf_classify(model, tr) == label
        assert model.neighbours(extract_features(tr))[0][0] == 0.0


def test_tie_break_smallest_label():
    tr = _trace(1)
    model = wf_train([(tr, "zeta"), (tr, "alpha"), (_trace(2), "mid")], k=1)
    assert wf_classify(model, tr) == "alpha"
    model3 = wf_train([(tr, "b"), (_trace(3), "a"), (_trace(4), "c")], k=3)
    assert wf_classify(model3, tr) == "a"


def test_k_validation():
    for k in (0, 2, -1):
        with pytest.raises(ValueError):
            WFModel(k)
    with pytest.raises(ValueError):
        wf_train([(_trace(1), "a")], k=3)
    with pytest.raises(ValueError):
        wf_train([], k=1)


def test_normalisation_fit_on_training_only():
    train = [(_trace(i), str(i)) for i in range(4)]
    model = wf_train(train, k=1)
    before = (model.mean.copy(), model.scale.copy())
    wf_classify(model, _trace(99, n=200))
    assert np.array_equal(before[0], model.mean) and np.array_equal(before[1], model.scale)


def test_training_deterministic():
    train = [(_trace(i), str(i % 3)) for i in range(9)]
    a, b = wf_train(train, k=3), wf_train(train, k=3)
    assert np.array_equal(a.X, b.X) and a.labels == b.labels


def test_sites_distinct_and_seeded():
    sites = make_sites(10, seed=0)
    assert sites == make_sites(10, seed=0)
    assert len({s.objects for s in sites}) == 10


def test_one_site_degenerate():
    rep = wf_evaluate(n_sites=1, samples=2, modes=("targeted",))
    assert rep.accuracy["targeted"] == 1.0 and rep.verdict["degenerate"] is True


# clogging: pattern and score -----------------------------------------------


def test_pattern_validation_and_wave():
    for bad in [dict(on_duration=0), dict(off_duration=-1), dict(cycles=0), dict(on_rate=-5)]:
        kw = dict(on_duration=1.0, off_duration=1.0, cycles=2, on_rate=1.0) | bad
        with pytest.raises(ValueError):
            ModulationPattern(**kw)
    p = ModulationPattern(1.0, 0.5, 2, 10.0)
    assert p.duration == 3.0
    assert list(p.level([-0.1, 0.0, 0.99, 1.0, 1.49, 1.5, 2.9, 3.0])) == [0, 1, 1, 0, 0, 1, 0, 0]


def _oracle_score(t, rtt, pattern, start, max_lag=2):
    wave = pattern.level(t - start)
    # least-squares line against sample times, solved independently of np.polyfit
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, rtt, rcond=None)
    resid = rtt - A @ coef
    best = -1.0
    n = len(t)
    for lag in range(-max_lag, max_lag + 1):
        x, y = (wave[: n - lag], resid[lag:]) if lag >= 0 else (wave[-lag:], resid[: n + lag])
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            r = 0.0
        else:
            r = stats.pearsonr(x, y).statistic
        best = max(best, r)
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 5.0), st.integers(-2, 2))
def test_score_matches_oracle(seed, amp, shift):
    rng = np.random.default_rng(seed)
    pattern = ModulationPattern(0.5, 0.5, 4, 1.0)
    t = np.arange(0.0, 4.0, 0.05) + 0.3
    wave = np.roll(pattern.level(t - 0.3), shift)
    rtt = 0.02 + amp * 0.01 * wave + 0.002 * rng.standard_normal(len(t)) + 0.001 * t
    series = ProbeSeries(b"x" * 20)
    for ti, ri in zip(t, rtt):
        series.add(round(ti * 1e6), round(ri * 1e6))
    ts, rs = series.arrays()
    assert correlation_score(series, pattern, 0.3) == pytest.approx(_oracle_score(ts, rs, pattern, 0.3), abs=1e-9)


def test_strong_signal_scores_near_one():
    pattern = ModulationPattern(0.5, 0.5, 4, 1.0)
    series = ProbeSeries(b"y" * 20)
    for i in range(80):
        t = i * 0.05
        series.add(round(t * 1e6), 20000 + (5000 if pattern.level([t])[0] else 0))
    assert correlation_score(series, pattern, 0.0) > 0.95


def test_probe_series_ordering():
    s = ProbeSeries(b"z" * 20)
    s.add(10, 5)
    with pytest.raises(ValueError):
        s.add(9, 5)


# clogging: probes in the simulator -----------------------------------------


def _probe_world(header=""):
    cfg = scenario(extra="prober 10.0.4.201 host\nsrc 10.0.3.251 source\nload 10.0.2.202 host", header=header)
    w = World(cfg).start()
    prober = OnionClient(w.node("prober"), ClientConfig(directory=w.directory_addr), name="prober")
    return w, prober


def test_probe_unloaded_rtt_is_forced():
    w, prober = _probe_world()
    series = probe_relay(w.net, prober, w.relays["r1"].descriptor(), 0.05, 1.0)
    assert series.measured and series.lost == 0 and len(series.samples) == 20
    # one cell each way over a 10 ms, 1e7 B/s link
    oracle_us = 2 * (10_000 + 512 / 1e7 * 1e6)
    rtts = [r for _, r in series.samples]
    assert all(abs(r - oracle_us) <= 1 for r in rtts)
    assert np.var(rtts) <= 1


def test_probe_shorter_than_interval():
    w, prober = _probe_world()
    series = probe_relay(w.net, prober, w.relays["r2"].descriptor(), 1.0, 0.1)
    assert len(series.samples) >= 1


def test_probe_loaded_relay_slower():
    w, prober = _probe_world()
    relay = w.relays["r1"]
    w.net.nodes[relay.host].bandwidth = 200_000
    base = probe_relay(w.net, prober, relay.descriptor(), 0.05, 1.0)
    # saturating pull through a circuit whose middle is r1
    loader = OnionClient(w.node("load"), ClientConfig(directory=w.directory_addr), name="load")
    circ = w.wait(loader.build_circuit([w.relays[n].descriptor() for n in ("r2", "r1", "r4")]).built)
    stream = circ.open_stream("10.0.3.251", SOURCE_PORT)
    w.wait(stream.opened)

    def pull():
        # 250 kB/s against 200 kB/s of relay egress: the queue grows steadily
        stream.send(struct.pack(">Q", 25_000))
        w.net.call_later(0.1, pull)

    pull()
    w.net.run_for(0.5)
    loaded = probe_relay(w.net, prober, relay.descriptor(), 0.05, 1.0)
    mean = lambda s: sum(r for _, r in s.samples) / len(s.samples)
    assert mean(loaded) > mean(base) * 1.5


def test_unmeasured_candidate_excluded():
    w, prober = _probe_world()
    pattern = ModulationPattern(0.2, 0.2, 1, 0.0)
    ghost = bytes(20)
    w.node("r3").online = False
    ids = [w.relays[n].node_id for n in ("r1", "r3")] + [ghost]
    attack = ClogAttack(w.net, prober, ids, pattern, 0.05)
    attack.setup()
    res = attack.run(w.net.now + 0.2)
    assert res.ranking == [ids[0].hex()]
    assert set(res.unmeasured) == {ids[1].hex(), ghost.hex()}
    assert len([x for x in res.warnings if "unmeasured" in x]) >= 2


# attack code never reads ground truth ---------------------------------------

FORBIDDEN = {"history", "current", "path", "circuits", "_circuits", "audit", "entries", "relays", "streams"}


@pytest.mark.parametrize("module", ["clogging.py", "fingerprint.py"])
def test_attack_code_reads_no_circuit_state(module):
    src = Path(adversary.__file__).with_name(module).read_text()
    touched = {n.attr for n in ast.walk(ast.parse(src)) if isinstance(n, ast.Attribute)}
    assert not touched & FORBIDDEN


def test_attack_interface_takes_only_ids():
    params = list(inspect.signature(ClogAttack).parameters)
    assert params == ["net", "prober", "candidates", "pattern", "interval"]


# reports -------------------------------------------------------------------


def test_report_serialization():
    r = AttackReport("clog", 1, {"a": 1}, scores={"x": 0.1234567891234})
    assert json.loads(r.to_json())["scores"]["x"] == 0.123456789
    assert r.to_json() == AttackReport("clog", 1, {"a": 1}, scores={"x": 0.1234567891234}).to_json()
    with pytest.raises(ValueError):
        AttackReport("clog", 1, {}, scores={"x": math.nan}).to_json()


def test_clog_negative_control_matches_null():
    from aranea.adversary.clog_experiment import clog_run

    excluded = [clog_run(seed=s, exclude_true=True) for s in range(1, 11)]
    null = [clog_run(seed=s, on_rate=0.0) for s in range(1, 11)]
    assert all(not set(r.verdict["true_relays"]) & set(r.ranking) for r in excluded)
    top_ex = [r.verdict["top_score"] for r in excluded]
    top_null = [r.verdict["top_score"] for r in null]
    assert stats.mannwhitneyu(top_ex, top_null).pvalue > 0.01
