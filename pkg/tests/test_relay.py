import logging
import random

import pytest

from aranea.cells import (
    Cell,
    Command,
    DestroyReason,
    EndReason,
    RelayCommand,
    RelayPayload,
    decode_blob,
    decode_cell,
    decode_relay,
    encode_blob,
    encode_cell,
    encode_extend,
    encode_relay,
    encode_target,
)
from aranea.onioncrypt import HopCrypto, client_handshake_finish, client_handshake_start, peel_backward, wrap_forward
from aranea.relay import Relay
from aranea.services import ECHO_PORT, Echo, serve
from aranea.simnet import SimNet
from aranea.transport import CellReader, Protocol

CLIENT = "10.0.2.201"
R1, R2 = "10.0.1.101", "10.0.1.102"
ECHO = "10.0.3.250"


class RawLink(Protocol):
    """Hand-driven client end of one link; keeps every cell it receives."""

    def __init__(self):
        self.reader = CellReader()
        self.cells: list[Cell] = []

    def data_received(self, conn, data):
        self.cells += [decode_cell(raw) for raw in self.reader.feed(data)]


class Harness:
    def __init__(self, exit_relays=(R2,)):
        self.net = SimNet(3)
        for h in (CLIENT, R1, R2, ECHO):
            self.net.add_node(h)
        for a, b in [(CLIENT, R1), (R1, R2), (R2, ECHO), (R1, ECHO)]:
            self.net.add_link(a, b, 0.005)
        self.relays = {}
        for h in (R1, R2):
            r = Relay(self.net.nodes[h], h, is_exit=h in exit_relays, seed=3)
            r.start()
            self.relays[h] = r
        serve(self.net.nodes[ECHO], ECHO_PORT, Echo)
        self.link = RawLink()
        self.conn = self.net.nodes[CLIENT].connect(R1, 9001, self.link)
        self.net.run_for(0.1)
        self.rng = random.Random(9)
        self.hops: list[HopCrypto] = []
        self.cid = 77
        self._peeled = []

    def send(self, cell: Cell):
        self.conn.send(encode_cell(cell))
        self.net.run_for(0.2)

    def create(self):
        r = self.relays[R1]
        hs = client_handshake_start(self.rng, r.node_id, r.identity.public)
        before = len(self.link.cells)
        self.send(Cell(self.cid, Command.CREATE, encode_blob(hs.blob)))
        new = self.link.cells[before:]
        assert [c.command for c in new] == [Command.CREATED]
        self.hops.append(HopCrypto(client_handshake_finish(hs, decode_blob(new[0].payload))))
        return new

    def relay(self, cmd, sid, body=b"", hop=None):
        hop = len(self.hops) - 1 if hop is None else hop
        payload = self.hops[hop].forward_digest.seal(encode_relay(RelayPayload(cmd, sid, body)))
        self.send(Cell(self.cid, Command.RELAY, wrap_forward(self.hops[: hop + 1], payload)))

    def extend(self):
        r = self.relays[R2]
        hs = client_handshake_start(self.rng, r.node_id, r.identity.public)
        before = len(self.link.cells)
        self.relay(RelayCommand.EXTEND, 0, encode_extend(R2, 9001, r.node_id, hs.blob))
        (msg,) = self.messages(before)
        assert msg[1].relay_cmd == RelayCommand.EXTENDED
        self.hops.append(HopCrypto(client_handshake_finish(hs, decode_blob(msg[1].body))))

    def messages(self, since=0):
        # backward digests are stateful, so each cell is peeled exactly once
        for i in range(len(self._peeled), len(self.link.cells)):
            c = self.link.cells[i]
            if c.command == Command.RELAY:
                hop, payload = peel_backward(self.hops, c.payload)
                self._peeled.append((hop, decode_relay(payload)))
            else:
                self._peeled.append(None)
        return [m for m in self._peeled[since:] if m is not None]


def test_create_one_created_one_entry():
    h = Harness()
    h.create()
    assert len(h.relays[R1].entries) == 1


def test_extend_sends_one_create_then_extended():
    h = Harness()
    h.create()
    tap = h.net.tap(R1, R2)
    h.extend()
    # R1 -> R2 carried exactly one CREATE; R2 -> R1 exactly one CREATED
    ups = [n for _, d, n in tap.trace if d == 1]
    downs = [n for _, d, n in tap.trace if d == -1]
    assert len(ups) == 1 and len(downs) == 1
    assert h.relays[R2].entries[0].prev_conn.peer[0] == R1


def test_destroy_unknown_circuit_silent(caplog):
    h = Harness()
    with caplog.at_level(logging.WARNING, logger="aranea.relay"):
        h.send(Cell(12345, Command.DESTROY, bytes([DestroyReason.REQUESTED])))
    assert h.link.cells == []
    assert any("unknown circuit" in r.message for r in caplog.records)


def test_destroy_tears_down_everything_idempotently():
    h = Harness()
    h.create()
    h.extend()
    h.send(Cell(h.cid, Command.DESTROY, bytes([DestroyReason.REQUESTED])))
    h.send(Cell(h.cid, Command.DESTROY, bytes([DestroyReason.REQUESTED])))
    assert h.relays[R1].circuits == {} and h.relays[R2].circuits == {}


def test_second_extend_is_protocol_error():
    h = Harness()
    h.create()
    h.extend()
    before = len(h.link.cells)
    h.relay(RelayCommand.EXTEND, 0, encode_extend(R2, 9001, bytes(20), bytes(52)), hop=0)
    assert [c.command for c in h.link.cells[before:]] == [Command.DESTROY]
    assert h.relays[R1].circuits == {}


def test_unrecognized_without_next_hop_destroys():
    h = Harness()
    h.create()
    h.send(Cell(h.cid, Command.RELAY, bytes(507)))
    assert h.link.cells[-1].command == Command.DESTROY


def test_begin_on_closed_port_refused():
    h = Harness()
    h.create()
    h.extend()
    before = len(h.link.cells)
    h.relay(RelayCommand.BEGIN, 1, encode_target(ECHO, 4444))
    ((hop, msg),) = h.messages(before)
    assert hop == 1 and msg.relay_cmd == RelayCommand.END and msg.body[0] == EndReason.CONNECT_REFUSED


def test_begin_at_non_exit_gets_exit_policy():
    h = Harness()
    h.create()
    before = len(h.link.cells)
    h.relay(RelayCommand.BEGIN, 1, encode_target(ECHO, ECHO_PORT))
    ((hop, msg),) = h.messages(before)
    assert msg.relay_cmd == RelayCommand.END and msg.body[0] == EndReason.EXIT_POLICY
    assert h.net.link(R1, ECHO) is not None  # a link existed, yet no contact was made
    assert not h.relays[R1].entries[0].streams


def test_echo_and_interleaved_streams():
    h = Harness()
    h.create()
    h.extend()
    for sid in (1, 2):
        h.relay(RelayCommand.BEGIN, sid, encode_target(ECHO, ECHO_PORT))
    connected = {m.stream_id for _, m in h.messages() if m.relay_cmd == RelayCommand.CONNECTED}
    assert connected == {1, 2}
    start = len(h.link.cells)
    expect = {1: b"", 2: b""}
    for i in range(6):
        sid = 1 + i % 2
        chunk = f"s{sid}-{i};".encode()
        expect[sid] += chunk
        h.relay(RelayCommand.DATA, sid, chunk)
    got = {1: b"", 2: b""}
    for _, m in h.messages(start):
        if m.relay_cmd == RelayCommand.DATA:
            got[m.stream_id] += m.body
    assert got == expect


def test_ping_end_to_end(demo_world):
    w = demo_world
    stream = w.wait(w.client.open_stream("echo.sim", ECHO_PORT))
    stream.send(b"ping")
    w.net.run_for(1)
    assert bytes(stream.received) == b"ping"
