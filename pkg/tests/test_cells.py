import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aranea.cells import (
    CELL_SIZE,
    PAYLOAD_SIZE,
    RELAY_DATA_SIZE,
    Cell,
    CellError,
    Command,
    RelayCommand,
    RelayPayload,
    decode_blob,
    decode_cell,
    decode_extend,
    decode_name,
    decode_relay,
    decode_resolved,
    decode_target,
    encode_blob,
    encode_cell,
    encode_extend,
    encode_name,
    encode_relay,
    encode_resolved,
    encode_target,
    split_cells,
)


def test_destroy_layout():
    raw = encode_cell(Cell(7, Command.DESTROY))
    assert raw == bytes([0, 0, 0, 7, 4]) + bytes(507)
    assert len(raw) == CELL_SIZE


def test_short_cell_rejected():
    with pytest.raises(CellError, match="short cell"):
        decode_cell(bytes(511))


def test_oversized_payload_rejected():
    with pytest.raises(CellError):
        Cell(1, Command.RELAY, bytes(PAYLOAD_SIZE + 1))


def test_unknown_command():
    buf = bytearray(random.Random(3).randbytes(CELL_SIZE))
    buf[4] = 200
    with pytest.raises(CellError, match="unknown command"):
        decode_cell(bytes(buf))


def test_all_zero_cell_rejected():
    with pytest.raises(CellError, match="unknown command 0"):
        decode_cell(bytes(CELL_SIZE))


def test_cell_round_trip_seeded():
    rng = random.Random(1)
    for _ in range(10_000):
        c = Cell(rng.getrandbits(32), rng.choice(list(Command)), rng.randbytes(rng.randint(0, PAYLOAD_SIZE)))
        assert decode_cell(encode_cell(c)) == c


def test_relay_data_layout():
    p = RelayPayload(RelayCommand.DATA, 3, b"hello", digest=b"\xd0\xd1\xd2\xd3")
    raw = encode_relay(p)
    assert raw[:11] == bytes([3, 0, 0, 0, 3, 0xD0, 0xD1, 0xD2, 0xD3, 0, 5])
    assert raw[11:] == b"hello" + bytes(491)
    assert len(raw) == PAYLOAD_SIZE


def test_relay_length_boundary():
    raw = bytearray(encode_relay(RelayPayload(RelayCommand.DATA, 1, b"x")))
    raw[9:11] = struct.pack(">H", 497)
    with pytest.raises(CellError):
        decode_relay(bytes(raw))
    with pytest.raises(CellError):
        RelayPayload(RelayCommand.DATA, 1, b"", length=497)
    assert decode_relay(encode_relay(RelayPayload(RelayCommand.DATA, 1, bytes(496)))).length == 496


def test_unknown_relay_command():
    raw = bytearray(encode_relay(RelayPayload(RelayCommand.DATA, 1, b"x")))
    raw[0] = 99
    with pytest.raises(CellError, match="unknown relay command"):
        decode_relay(bytes(raw))


@pytest.mark.parametrize("cmd", list(RelayCommand))
def test_stream_id_zero_iff_circuit_level(cmd):
    circuit_level = cmd in (RelayCommand.EXTEND, RelayCommand.EXTENDED)
    if circuit_level:
        RelayPayload(cmd, 0)
        with pytest.raises(CellError):
            RelayPayload(cmd, 5)
    else:
        RelayPayload(cmd, 5)
        with pytest.raises(CellError):
            RelayPayload(cmd, 0)


relay_payloads = st.builds(
    lambda cmd, sid, data, rec, dig: RelayPayload(
        cmd, 0 if cmd in (RelayCommand.EXTEND, RelayCommand.EXTENDED) else sid, data, rec, dig
    ),
    st.sampled_from(list(RelayCommand)),
    st.integers(1, 0xFFFF),
    st.binary(max_size=RELAY_DATA_SIZE),
    st.binary(min_size=2, max_size=2),
    st.binary(min_size=4, max_size=4),
)


@given(relay_payloads)
def test_relay_round_trip(p):
    assert decode_relay(encode_relay(p)) == p
    assert decode_relay(encode_relay(p)).body == p.body


@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.sampled_from(list(Command)), st.binary(max_size=PAYLOAD_SIZE)), max_size=8))
def test_concatenated_cells_resegment(specs):
    cells = [Cell(*s) for s in specs]
    stream = b"".join(encode_cell(c) for c in cells)
    assert len(stream) == CELL_SIZE * len(cells)
    assert split_cells(stream) == cells


def test_bodies_round_trip():
    assert decode_blob(encode_blob(b"abc") + b"\0\0") == b"abc"
    nid = bytes(range(20))
    assert decode_extend(encode_extend("10.0.1.2", 9001, nid, b"blob")) == ("10.0.1.2", 9001, nid, b"blob")
    assert decode_target(encode_target("echo.sim", 7)) == ("echo.sim", 7)
    assert decode_name(encode_name("echo.sim")) == "echo.sim"
    assert decode_resolved(encode_resolved("10.0.3.250")) == (4, "10.0.3.250")
    assert decode_resolved(encode_resolved(None))[1] is None
