"""Closed-world fingerprinting experiment over synthetic sites fetched through the simulator.

Traces come only from a tap on the user's access link.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..services import WEB_PORT, web_request
from ..simnet.scenario import SimConfig, load_preset
from ..simnet.trace import TrafficTrace
from ..transport import Deferred
from ..world import World
from .fingerprint import wf_train
from .report import AttackReport


@dataclass(frozen=True)
class Site:
    name: str
    objects: tuple[tuple[int, int, float], ...]  # (request bytes, response bytes, think seconds)


@dataclass(frozen=True)
class UserConfig:
    name: str
    latency: float
    bandwidth: float


DEFAULT_USERS = (
    UserConfig("user-a", 0.010, 5e6),
    UserConfig("user-b", 0.030, 2e6),
    UserConfig("user-c", 0.060, 1e6),
)


def make_sites(n: int, seed: int = 0) -> list[Site]:
    sites = []
    for i in range(n):
        rng = random.Random(f"site/{seed}/{i}")
        objs = tuple(
            (rng.randint(200, 1500), rng.randint(1_000, 20_000), round(rng.uniform(0.02, 0.2), 3))
            for _ in range(rng.randint(2, 8))
        )
        sites.append(Site(f"site{i:02d}", objs))
    return sites


class _Fetch:
    def __init__(self, net, stream, site: Site, noise: random.Random, jitter: float):
        self.net, self.stream, self.site = net, stream, site
        self.noise, self.jitter = noise, jitter
        self.done = Deferred()
        self.idx = 0
        self.need = 0
        stream.on_data = self._data
        stream.on_close = lambda _r: self.done.resolve(False)
        self._request()

    def _request(self):
        req, resp, _ = self.site.objects[self.idx]
        self.need = resp
        self.stream.send(web_request(resp, req))

    def _data(self, data: bytes):
        self.need -= len(data)
        if self.need > 0:
            return
        think = self.site.objects[self.idx][2]
        self.idx += 1
        if self.idx == len(self.site.objects):
            self.done.resolve(True)
            return
        if self.jitter:
            think *= max(0.05, self.noise.gauss(1.0, self.jitter))
        self.net.call_later(think, self._request)


def collect_traces(
    sites: list[Site],
    user: UserConfig,
    rounds: int,
    jitter: float = 0.0,
    seed: int = 0,
    cfg: SimConfig | None = None,
) -> list[list[tuple[TrafficTrace, str]]]:
    """Fetch every site once per round; returns ``rounds`` lists of (trace, label)."""
    cfg = (cfg or load_preset("wf")).with_seed(seed)
    world = World(cfg, rotation=1e9)
    net = world.net
    client_host = world.client.transport.host
    for spec in cfg.nodes:
        if spec.host != client_host and spec.wan:
            net.add_link(client_host, spec.host, user.latency, user.bandwidth, min(jitter, 0.99))
    world.start()
    web = cfg.by_role("web")[0].host
    client = world.client
    net.wait(client.pick_circuit(), timeout=60)
    noise = net.rng(f"wf/think/{user.name}")
    out = []
    for _ in range(rounds):
        batch = []
        for site in sites:
            tap = net.tap_node(client_host, content=False)
            stream = net.wait(client.open_stream(web, WEB_PORT), timeout=60)
            fetch = _Fetch(net, stream, site, noise, jitter)
            net.wait(fetch.done, timeout=600)
            stream.close()
            net.run_for(0.5)
            tap.detach()
            batch.append((tap.trace, site.name))
        out.append(batch)
    return out


def _score(model, tests: list[tuple[TrafficTrace, str]], confusion: dict) -> float:
    from .fingerprint import wf_classify

    right = 0
    for trace, label in tests:
        guess = wf_classify(model, trace)
        row = confusion.setdefault(label, {})
        row[guess] = row.get(guess, 0) + 1
        right += guess == label
    return right / len(tests) if tests else 0.0


def wf_evaluate(
    n_sites: int = 10,
    samples: int = 5,
    jitter: float = 0.0,
    seed: int = 0,
    k: int = 1,
    users: tuple[UserConfig, ...] = DEFAULT_USERS,
    modes: tuple[str, ...] = ("targeted", "nontargeted"),
) -> AttackReport:
    """``samples`` training and ``samples`` disjoint test fetches per site and user."""
    sites = make_sites(n_sites, seed)
    train: dict[str, list] = {}
    test: dict[str, list] = {}
    need = users if "nontargeted" in modes else users[:1]
    for i, user in enumerate(need):
        rounds = collect_traces(sites, user, 2 * samples, jitter, seed=seed * 1000 + i)
        train[user.name] = [x for batch in rounds[:samples] for x in batch]
        test[user.name] = [x for batch in rounds[samples:] for x in batch]

    victim = users[0].name
    accuracy: dict = {}
    confusion: dict = {}
    if "targeted" in modes:
        model = wf_train(train[victim], k)
        confusion["targeted"] = {}
        accuracy["targeted"] = _score(model, test[victim], confusion["targeted"])
    if "nontargeted" in modes:
        model = wf_train([x for u in need for x in train[u.name]], k)
        confusion["nontargeted"] = {}
        per_user = {u.name: _score(model, test[u.name], confusion["nontargeted"]) for u in need}
        accuracy["nontargeted"] = sum(per_user.values()) / len(per_user)
        accuracy["nontargeted_per_user"] = per_user
    chance = 1.0 / n_sites
    report = AttackReport(
        kind="wf",
        seed=seed,
        params={
            "sites": n_sites,
            "samples": samples,
            "jitter": jitter,
            "k": k,
            "modes": list(modes),
            "users": [{"name": u.name, "latency": u.latency, "bandwidth": u.bandwidth} for u in need],
            "victim": victim,
        },
        accuracy=accuracy,
        confusion=confusion,
    )
    report.verdict = {
        "chance": chance,
        "degenerate": n_sites == 1,
        "above_chance": {m: accuracy[m] > chance for m in modes},
    }
    if "targeted" in accuracy and "nontargeted" in accuracy:
        report.verdict["targeted_minus_nontargeted"] = accuracy["targeted"] - accuracy["nontargeted"]
    return report
