"""Real loopback sockets, one process per node, driven through the CLI."""

import socket
import struct
import subprocess
import sys
import threading
import time

import pytest


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def echo_server():
    srv = socket.create_server(("127.0.0.1", 0))

    def loop():
        while True:
            try:
                c, _ = srv.accept()
            except OSError:
                return
            threading.Thread(target=lambda c=c: [c.sendall(d) for d in iter(lambda: c.recv(4096), b"")], daemon=True).start()

    threading.Thread(target=loop, daemon=True).start()
    return srv


def wait_port(port, timeout=10):
    end = time.time() + timeout
    while time.time() < end:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(port)


@pytest.fixture
def live_net(tmp_path):
    procs = []

    def spawn(*args):
        p = subprocess.Popen([sys.executable, "-m", "aranea.cli", *args], stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
        procs.append(p)
        return p

    dport = free_port()
    spawn("dir", "serve", "--listen", f"127.0.0.1:{dport}")
    wait_port(dport)
    for i in range(3):
        port = free_port()
        extra = ["--exit"] if i == 2 else []
        spawn("relay", "run", "--listen", f"127.0.0.1:{port}", "--directory", f"127.0.0.1:{dport}",
              "--key-file", str(tmp_path / f"r{i}.key"), *extra)
        wait_port(port)
    sport = free_port()
    spawn("client", "socks", "--listen", f"127.0.0.1:{sport}", "--directory", f"127.0.0.1:{dport}")
    wait_port(sport)
    time.sleep(0.5)  # let every relay finish publishing
    yield sport, tmp_path
    for p in procs:
        p.terminate()
    for p in procs:
        p.wait(5)


def recv_exact(s, n):
    buf = b""
    while len(buf) < n:
        chunk = s.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return buf


def test_socks_over_real_sockets(live_net):
    sport, tmp = live_net
    echo = echo_server()
    eport = echo.getsockname()[1]
    with socket.create_connection(("127.0.0.1", sport), timeout=20) as s:
        s.sendall(b"\x05\x01\x00")
        assert recv_exact(s, 2) == b"\x05\x00"
        name = b"localhost"
        s.sendall(b"\x05\x01\x00\x03" + bytes([len(name)]) + name + struct.pack(">H", eport))
        reply = recv_exact(s, 10)
        assert reply[:2] == b"\x05\x00"
        s.sendall(b"over loopback")
        assert recv_exact(s, 13) == b"over loopback"
    with socket.create_connection(("127.0.0.1", sport), timeout=5) as s:
        s.sendall(b"\x05\x01\x02")
        assert recv_exact(s, 2) == b"\x05\xff"
    echo.close()
    key = (tmp / "r0.key")
    assert key.stat().st_mode & 0o777 == 0o600 and len(bytes.fromhex(key.read_text().strip())) == 32
