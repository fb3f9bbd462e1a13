import json
import subprocess
import sys

import pytest

from aranea.cli import main


def run(*args):
    return subprocess.run([sys.executable, "-m", "aranea.cli", *args], capture_output=True, text=True, timeout=120)


def test_unknown_subcommand_exit_2():
    r = run("bogus")
    assert r.returncode == 2 and "usage" in r.stderr


def test_missing_leaf_exit_2():
    assert run("bench").returncode == 2
    assert run("attack", "wf", "--mode", "sideways").returncode == 2


def test_operational_error_exit_1(tmp_path):
    assert main(["--scenario", str(tmp_path / "nope.scn"), "sim", "demo"]) == 1
    bad = tmp_path / "bad.scn"
    bad.write_text("[nodes]\nx 10.0.0.1 wizard\n")
    assert main(["--scenario", str(bad), "sim", "demo"]) == 1


def test_sim_demo_smoke(capsys):
    assert main(["sim", "demo"]) == 0
    out = capsys.readouterr().out
    assert "knowledge isolation" in out and out.count("[ok]") == 3


def _json(capsys, *argv):
    assert main(["--json", *argv]) == 0
    return capsys.readouterr().out


def test_bench_latency_json_identical(capsys):
    a = _json(capsys, "bench", "latency")
    b = _json(capsys, "bench", "latency")
    assert a == b
    assert json.loads(a)["latency_ratio"] == pytest.approx(4.0, abs=0.1)


def test_flags_after_subcommand(capsys):
    a = _json(capsys, "--seed", "3", "sim", "demo")
    assert main(["sim", "demo", "--seed", "3", "--json"]) == 0
    assert capsys.readouterr().out == a
    assert json.loads(a)["seed"] == 3


def test_emit_config(tmp_path, capsys):
    cfg = tmp_path / "gw.conf"
    cfg.write_text("ssid = LabNet\n")
    assert main(["gateway", "emit-config", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert "ssid=LabNet" in (tmp_path / "hostapd.conf").read_text()
    assert (tmp_path / "dnsmasq.conf").exists()
    cfg.write_text("wpa_passphrase = short\n")
    assert main(["gateway", "emit-config", "--config", str(cfg)]) == 1


def test_leaktest_exit_and_report(capsys):
    rep = json.loads(_json(capsys, "leaktest"))
    assert rep["leak_report"]["leaked"] is False
    assert main(["--json", "leaktest", "--unsafe-bypass-resolver"]) == 0
    assert json.loads(capsys.readouterr().out)["leak_report"]["leaked"] is True
