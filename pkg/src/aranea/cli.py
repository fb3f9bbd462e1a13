"""``aranea`` command line: live nodes over sockets, and deterministic sim-mode experiments."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .simnet.scenario import ScenarioError, SimConfig, load_preset, load_scenario
from .transport import parse_addr

log = logging.getLogger("aranea")


class OperationalError(Exception):
    pass


def _emit(args, report: dict, text: str | None = None) -> None:
    if getattr(args, "json", False):
        print(json.dumps(report, sort_keys=True, indent=2))
    else:
        print(text if text is not None else json.dumps(report, sort_keys=True, indent=2))


def _scenario(args, default: str) -> tuple[SimConfig, str]:
    name = getattr(args, "scenario", None) or default
    path = Path(name)
    try:
        cfg = load_scenario(path) if path.suffix == ".scn" or path.exists() else load_preset(name)
    except FileNotFoundError:
        raise OperationalError(f"no such scenario: {name}") from None
    except ScenarioError as e:
        raise OperationalError(f"bad scenario {name}: {e}") from None
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg, path.stem if path.suffix else name


# live nodes ---------------------------------------------------------------


def cmd_dir_serve(args) -> int:
    from .directory import DirectoryServer
    from .netio import SocketTransport

    host, port = parse_addr(args.listen)
    t = SocketTransport(host)
    with t.lock:
        DirectoryServer(t, port, args.expiry)
    log.info("directory listening on %s:%d", host, port)
    t.run_forever()
    return 0


def cmd_relay_run(args) -> int:
    from .netio import SocketTransport
    from .onioncrypt import IdentityKeypair
    from .relay import Relay

    host, port = parse_addr(args.listen)
    identity = None
    if args.key_file:
        key_path = Path(args.key_file)
        if key_path.exists():
            identity = IdentityKeypair.from_private(bytes.fromhex(key_path.read_text().strip()))
        else:
            identity = IdentityKeypair.from_private(os.urandom(32))
            key_path.write_text(identity.private.hex() + "\n")
            key_path.chmod(0o600)
    t = SocketTransport(host)
    relay = Relay(
        t, args.advertise or host, port, identity=identity, is_exit=args.exit,
        bandwidth=args.bandwidth, seed=getattr(args, "seed", None),
        directory_addr=parse_addr(args.directory), republish_interval=args.republish,
    )
    with t.lock:
        relay.start()
    try:
        t.wait(relay.published, timeout=30)
    except Exception as e:
        raise OperationalError(f"could not publish descriptor: {e}") from None
    log.info("relay %s listening on %s:%d%s", relay.node_id.hex()[:16], host, port, " (exit)" if args.exit else "")
    t.run_forever()
    return 0


def cmd_client_socks(args) -> int:
    from .client.node import ClientConfig, OnionClient
    from .client.socks5 import socks5_serve
    from .netio import SocketTransport

    host, port = parse_addr(args.listen)
    t = SocketTransport(host)
    cfg = ClientConfig(
        directory=parse_addr(args.directory), rotation_period=args.rotation,
        seed=getattr(args, "seed", None), socks_listen=(host, port),
    )
    with t.lock:
        client = OnionClient(t, cfg)
        socks5_serve(t, port, client)
    log.info("SOCKS5 listening on %s:%d", host, port)
    t.run_forever()
    return 0


def _gateway_config(args):
    from .gateway.config import ConfigError, GatewayConfig

    try:
        return GatewayConfig.load(args.config) if args.config else GatewayConfig()
    except (ConfigError, OSError) as e:
        raise OperationalError(f"gateway config: {e}") from None


def cmd_gateway_run(args) -> int:
    from .client.node import ClientConfig, OnionClient
    from .gateway.node import Gateway
    from .netio import SocketTransport

    cfg = _gateway_config(args)
    t = SocketTransport(args.bind or cfg.address)
    client = OnionClient(t, ClientConfig(directory=parse_addr(cfg.directory), seed=getattr(args, "seed", None)))
    try:
        with t.lock:
            Gateway(t, cfg, client, header_mode=True).start()
    except OSError as e:
        raise OperationalError(f"cannot bind gateway ports: {e}") from None
    log.info("gateway on %s (dns %d, funnel %d)", t.host, cfg.dns_port, cfg.funnel_port)
    t.run_forever()
    return 0


def cmd_gateway_emit(args) -> int:
    from .gateway.config import emit_ap_configs

    files = emit_ap_configs(_gateway_config(args))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in sorted(files.items()):
            (out / name).write_text(text)
            print(out / name)
    else:
        for name, text in sorted(files.items()):
            print(f"# ---- {name}\n{text}")
    return 0


# sim mode -----------------------------------------------------------------


def cmd_sim_demo(args) -> int:
    from .demo import format_demo, run_demo

    cfg, _ = _scenario(args, "demo")
    report = run_demo(cfg)
    _emit(args, report, format_demo(report))
    return 0 if report["echo_ok"] else 1


def cmd_attack_clog(args) -> int:
    from .adversary.clog_experiment import clog_run

    cfg, name = _scenario(args, "clog")
    report = clog_run(cfg, on_rate=args.on_rate, bg_rate=args.bg_rate, exclude_true=args.exclude_true, scenario_name=name)
    d = report.to_dict()
    v = d["verdict"]
    text = "\n".join(
        [f"ranking (top 5 of {len(d['ranking'])}):"]
        + [f"  {i + 1}. {k[:16]}  r={d['scores'][k]:.3f}" for i, k in enumerate(d["ranking"][:5])]
        + [f"true relays at ranks {v['true_ranks']}; all in top 3: {v['true_in_top3']}"]
        + [f"warning: {w}" for w in d["warnings"]]
    )
    _emit(args, d, text)
    return 0


def cmd_attack_wf(args) -> int:
    from .adversary.wf_experiment import wf_evaluate

    modes = ("targeted", "nontargeted") if args.mode == "both" else (args.mode,)
    report = wf_evaluate(args.sites, args.samples, args.jitter, getattr(args, "seed", 0) or 0, args.k, modes=modes)
    d = report.to_dict()
    text = "\n".join(
        [f"{m}: accuracy {d['accuracy'][m]:.3f} (chance {d['verdict']['chance']:.3f})" for m in modes]
        + (["degenerate: single-site world"] if d["verdict"]["degenerate"] else [])
    )
    _emit(args, d, text)
    return 0


def cmd_bench_latency(args) -> int:
    from .bench import bench_latency

    cfg, name = _scenario(args, "latency")
    r = bench_latency(cfg, args.samples, name).to_dict()
    text = (
        f"direct RTT {r['direct_rtt']['mean'] * 1e3:.3f} ms, circuit RTT {r['circuit_rtt']['mean'] * 1e3:.3f} ms, "
        f"ratio {r['latency_ratio']:.3f} (oracle {r['oracle']['ratio']:.3f})"
    )
    _emit(args, r, text)
    return 0


def cmd_bench_throughput(args) -> int:
    from .bench import bench_throughput

    cfg, name = _scenario(args, "throughput")
    r = bench_throughput(cfg, args.bytes, name).to_dict()
    text = (
        f"direct {r['throughput_direct'] / 1e6:.3f} MB/s, circuit {r['throughput_circuit'] / 1e6:.3f} MB/s, "
        f"bottleneck {r['bottleneck_bandwidth'] / 1e6:.3f} MB/s"
    )
    _emit(args, r, text)
    return 0


def cmd_leaktest(args) -> int:
    from .gateway.session import run_gateway_session

    cfg, _ = _scenario(args, "gateway")
    result = run_gateway_session(cfg, bypass_resolver=args.unsafe_bypass_resolver)
    d = result.to_dict()
    rep = d["leak_report"]
    text = (
        f"lease {d['lease']}, resolved {d['resolved']}, echo {'ok' if d['echo_ok'] else 'failed'}\n"
        f"links audited {rep['links_audited']}, DNS leaks {rep['dns_leaks']}, "
        f"direct contacts {rep['direct_contacts']} -> {'LEAKED' if rep['leaked'] else 'no leak'}"
    )
    _emit(args, d, text)
    return 0


# parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="rng seed")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    common.add_argument("--scenario", default=argparse.SUPPRESS, help="scenario file or preset name")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="aranea", parents=[common], description=__doc__)
    sub = p.add_subparsers(dest="group", required=True, metavar="command")

    def group(name, help):
        g = sub.add_parser(name, help=help)
        return g.add_subparsers(dest="action", required=True, metavar="action")

    def leaf(parent, name, fn, help):
        c = parent.add_parser(name, parents=[common], help=help)
        c.set_defaults(fn=fn)
        return c

    d = group("dir", "directory server")
    c = leaf(d, "serve", cmd_dir_serve, "serve descriptors and the consensus")
    c.add_argument("--listen", default="127.0.0.1:7000")
    c.add_argument("--expiry", type=float, default=3600.0)

    r = group("relay", "relay node")
    c = leaf(r, "run", cmd_relay_run, "run a relay")
    c.add_argument("--listen", default="127.0.0.1:9001")
    c.add_argument("--advertise", help="address published in the descriptor")
    c.add_argument("--directory", default="127.0.0.1:7000")
    c.add_argument("--exit", action="store_true")
    c.add_argument("--bandwidth", type=int, default=1_000_000)
    c.add_argument("--key-file", help="hex X25519 private key; created if missing")
    c.add_argument("--republish", type=float, default=1800.0)

    cl = group("client", "onion client")
    c = leaf(cl, "socks", cmd_client_socks, "SOCKS5 front-end")
    c.add_argument("--listen", default="127.0.0.1:9050")
    c.add_argument("--directory", default="127.0.0.1:7000")
    c.add_argument("--rotation", type=float, default=600.0)

    g = group("gateway", "transparent gateway")
    c = leaf(g, "run", cmd_gateway_run, "run DHCP, DNS and the TCP funnel")
    c.add_argument("--config")
    c.add_argument("--bind", help="address to bind (default: gateway address)")
    c = leaf(g, "emit-config", cmd_gateway_emit, "write hostapd.conf and dnsmasq.conf")
    c.add_argument("--config")
    c.add_argument("--out", help="directory to write into (default: stdout)")

    s = group("sim", "simulated network")
    leaf(s, "demo", cmd_sim_demo, "5-relay echo with knowledge-isolation audit")

    a = group("attack", "attack lab")
    c = leaf(a, "clog", cmd_attack_clog, "clogging attack")
    c.add_argument("--on-rate", type=float, help="modulation amplitude in bytes/s")
    c.add_argument("--bg-rate", type=float, help="background burst rate in bytes/s")
    c.add_argument("--exclude-true", action="store_true", help="negative control")
    c = leaf(a, "wf", cmd_attack_wf, "website fingerprinting")
    c.add_argument("--sites", type=int, default=10)
    c.add_argument("--samples", type=int, default=5)
    c.add_argument("--jitter", type=float, default=0.0)
    c.add_argument("--mode", choices=("targeted", "nontargeted", "both"), default="both")
    c.add_argument("--k", type=int, default=1)

    b = group("bench", "measurements")
    c = leaf(b, "latency", cmd_bench_latency, "direct vs circuit RTT")
    c.add_argument("--samples", type=int, default=30)
    c = leaf(b, "throughput", cmd_bench_throughput, "direct vs circuit goodput")
    c.add_argument("--bytes", type=int, default=10_000_000)

    c = sub.add_parser("leaktest", parents=[common], help="gateway DNS and direct-contact leak audit")
    c.set_defaults(fn=cmd_leaktest)
    c.add_argument("--unsafe-bypass-resolver", action="store_true", help="negative control: resolve on the WAN")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = getattr(args, "verbose", 0) or 0
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except OperationalError as e:
        print(f"aranea: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # any failure inside a command is operational, not usage
        log.debug("command failed", exc_info=True)
        print(f"aranea: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
