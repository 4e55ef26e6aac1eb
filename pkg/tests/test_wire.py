import struct

import pytest
from hypothesis import given, strategies as st

from caans import wire
from caans.wire import (
    BadMsgTypeError,
    EmptyValueError,
    FieldRangeError,
    MsgType,
    NonzeroReservedError,
    OversizedValueError,
    PaxosMessage,
    SentinelViolationError,
    TrailingBytesError,
    TruncatedError,
    decode,
    encode,
    wire_size,
)


def msg(msgtype=MsgType.PHASE_2A, inst=0, rnd=0, vrnd=0, swid=0, value=b"v"):
    return PaxosMessage(msgtype, inst, rnd, vrnd, swid, value)


def test_phase_2a_with_16_byte_value_is_60_bytes():
    data = encode(msg(value=b"x" * 16))
    assert len(data) == 60
    # 14B Ethernet + 20B IP + 8B UDP framing around it gives the full
    # 102-byte consensus packet.
    assert 14 + 20 + 8 + len(data) == 102


def test_phase_1b_sentinel_is_all_zero_except_msgtype():
    data = encode(msg(MsgType.PHASE_1B, value=b""))
    assert len(data) == 44
    assert data == b"\x00\x02" + b"\x00" * 42


def test_field_layout_offsets():
    m = msg(MsgType.PHASE_2B, inst=0x01020304, rnd=0x0506, vrnd=0x0708,
            swid=0x090A0B0C0D0E0F10, value=b"AB")
    data = encode(m)
    assert data[0:2] == b"\x00\x04"
    assert data[2:6] == b"\x01\x02\x03\x04"
    assert data[6:8] == b"\x05\x06"
    assert data[8:10] == b"\x07\x08"
    assert data[10:18] == b"\x09\x0a\x0b\x0c\x0d\x0e\x0f\x10"
    assert data[18:22] == struct.pack("!I", 2)
    assert data[22:44] == b"\x00" * 22
    assert data[44:] == b"AB"


def test_size_law():
    for n in (1, 16, 64, 1400):
        assert len(encode(msg(value=b"z" * n))) == 44 + n
        assert wire_size(msg(value=b"z" * n)) == 44 + n


def test_encode_deterministic():
    m = msg(inst=7, rnd=3, vrnd=1, swid=42, value=b"hello")
    assert encode(m) == encode(m)


def test_encode_rejects_oversized_value():
    with pytest.raises(OversizedValueError):
        encode(msg(value=b"x" * 1401))


def test_encode_rejects_empty_value_outside_phase_1b():
    for mt in (MsgType.REQUEST, MsgType.PHASE_1A, MsgType.PHASE_2A, MsgType.PHASE_2B):
        with pytest.raises(EmptyValueError):
            encode(msg(mt, value=b""))


def test_encode_rejects_out_of_range_fields():
    with pytest.raises(FieldRangeError):
        encode(msg(inst=2**32))
    with pytest.raises(FieldRangeError):
        encode(msg(rnd=2**16))
    with pytest.raises(BadMsgTypeError):
        encode(PaxosMessage(5, 0, 0, 0, 0, b"v"))


def test_decode_truncated_header():
    with pytest.raises(TruncatedError):
        decode(b"\x00" * 43)


def test_decode_truncated_value():
    data = encode(msg(value=b"x" * 16))
    assert len(data) == 60
    with pytest.raises(TruncatedError):
        decode(data[:50])


def test_decode_trailing_bytes():
    data = encode(msg(value=b"x" * 4))
    with pytest.raises(TrailingBytesError):
        decode(data + b"!")


def test_decode_bad_msgtype():
    data = bytearray(encode(msg(value=b"v")))
    data[0:2] = b"\x00\x05"
    with pytest.raises(BadMsgTypeError):
        decode(bytes(data))


def test_decode_nonzero_reserved():
    data = bytearray(encode(msg(value=b"v")))
    data[30] = 0xFF
    with pytest.raises(NonzeroReservedError):
        decode(bytes(data))


def test_decode_sentinel_violation():
    # Hand-build a PHASE_2A header claiming zero value bytes.
    data = struct.pack("!HIHHQI22s", 3, 0, 0, 0, 0, 0, b"\x00" * 22)
    with pytest.raises(SentinelViolationError):
        decode(data)


def test_decode_rejects_overlong_declared_value():
    data = struct.pack("!HIHHQI22s", 3, 0, 0, 0, 0, 1401, b"\x00" * 22) + b"x" * 1401
    with pytest.raises(OversizedValueError):
        decode(data)


valid_messages = st.one_of(
    st.builds(
        PaxosMessage,
        msgtype=st.sampled_from([MsgType.REQUEST, MsgType.PHASE_1A, MsgType.PHASE_2A, MsgType.PHASE_2B]),
        inst=st.integers(0, 2**32 - 1),
        rnd=st.integers(0, 2**16 - 1),
        vrnd=st.integers(0, 2**16 - 1),
        swid=st.integers(0, 2**64 - 1),
        value=st.binary(min_size=1, max_size=1400),
    ),
    st.builds(
        PaxosMessage,
        msgtype=st.just(MsgType.PHASE_1B),
        inst=st.integers(0, 2**32 - 1),
        rnd=st.integers(0, 2**16 - 1),
        vrnd=st.integers(0, 2**16 - 1),
        swid=st.integers(0, 2**64 - 1),
        value=st.binary(min_size=0, max_size=1400),
    ),
)


@given(valid_messages)
def test_round_trip_identity(m):
    assert decode(encode(m)) == m


@given(valid_messages)
def test_round_trip_size_law(m):
    assert len(encode(m)) == wire.HEADER_SIZE + len(m.value)


@given(st.binary(max_size=200))
def test_decode_never_crashes_with_foreign_exceptions(data):
    try:
        m = decode(data)
    except wire.WireError:
        return
    assert encode(m) == data
