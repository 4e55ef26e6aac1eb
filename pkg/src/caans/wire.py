"""Binary framing for consensus packets carried inside UDP datagrams.

This module is the normative definition of the wire format. Every message,
regardless of type, uses the same fixed 44-byte header (the union of all
fields any message type needs), in network byte order:

    offset  size  field
    0       2     msgtype    (REQUEST=0, PHASE_1A=1, PHASE_1B=2, PHASE_2A=3, PHASE_2B=4)
    2       4     inst       consensus instance number
    6       2     rnd        round number
    8       2     vrnd       round in which the sender last voted
    10      8     swid       sender identifier
    18      4     value_len  payload length in bytes
    22      22    reserved   must be zero

followed by exactly ``value_len`` payload bytes. A PHASE_1B with an empty
value is the "no vote" sentinel; every other message type must carry a
non-empty value. The payload is capped at 1400 bytes so a full message
always fits a single unfragmented datagram. Data integrity is left to the
UDP checksum; there is no CRC of our own.
"""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import NamedTuple

HEADER_SIZE = 44
MAX_VALUE_SIZE = 1400

_HEADER = struct.Struct("!HIHHQI22s")
_RESERVED = b"\x00" * 22

assert _HEADER.size == HEADER_SIZE


class MsgType(IntEnum):
    REQUEST = 0
    PHASE_1A = 1
    PHASE_1B = 2
    PHASE_2A = 3
    PHASE_2B = 4


class WireError(ValueError):
    """A datagram (or message about to be encoded) violates the framing rules."""


class OversizedValueError(WireError):
    pass


class EmptyValueError(WireError):
    pass


class FieldRangeError(WireError):
    pass


class TruncatedError(WireError):
    pass


class TrailingBytesError(WireError):
    pass


class BadMsgTypeError(WireError):
    pass


class NonzeroReservedError(WireError):
    pass


class SentinelViolationError(WireError):
    pass


class PaxosMessage(NamedTuple):
    """One consensus packet; the union of all fields used by any message type."""

    msgtype: int
    inst: int
    rnd: int
    vrnd: int
    swid: int
    value: bytes


def wire_size(msg: PaxosMessage) -> int:
    """On-wire size in bytes: always 44 + len(value)."""
    return HEADER_SIZE + len(msg.value)


def encode(msg: PaxosMessage) -> bytes:
    """Serialize ``msg`` to its unique on-wire byte string.

    Raises a WireError subclass if the message violates an invariant:
    OversizedValueError above 1400 payload bytes, EmptyValueError for an
    empty value on anything but PHASE_1B, FieldRangeError for header fields
    outside their unsigned widths.
    """
    value = msg.value
    if len(value) > MAX_VALUE_SIZE:
        raise OversizedValueError(f"value is {len(value)} bytes, max {MAX_VALUE_SIZE}")
    if not value and msg.msgtype != MsgType.PHASE_1B:
        raise EmptyValueError(
            "empty value is the PHASE_1B no-vote sentinel; "
            f"msgtype {msg.msgtype} requires a payload"
        )
    if not 0 <= msg.msgtype <= 4:
        raise BadMsgTypeError(f"msgtype {msg.msgtype} outside 0..4")
    try:
        header = _HEADER.pack(
            msg.msgtype, msg.inst, msg.rnd, msg.vrnd, msg.swid, len(value), _RESERVED
        )
    except struct.error as exc:
        raise FieldRangeError(str(exc)) from None
    return header + value


def decode(data: bytes) -> PaxosMessage:
    """Parse a datagram back into the unique message whose encode() equals it.

    Rejects anything encode() could not have produced: short datagrams
    (TruncatedError), unknown message types (BadMsgTypeError), non-zero
    reserved bytes and trailing garbage (framing-bug catchers), and an
    empty value on a non-PHASE_1B message (SentinelViolationError).
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"{len(data)} bytes, header needs {HEADER_SIZE}")
    msgtype, inst, rnd, vrnd, swid, value_len, reserved = _HEADER.unpack_from(data)
    if msgtype > 4:
        raise BadMsgTypeError(f"msgtype {msgtype} outside 0..4")
    if reserved != _RESERVED:
        raise NonzeroReservedError("reserved bytes must be zero")
    if value_len > MAX_VALUE_SIZE:
        raise OversizedValueError(f"declared value_len {value_len} exceeds {MAX_VALUE_SIZE}")
    total = HEADER_SIZE + value_len
    if len(data) < total:
        raise TruncatedError(f"{len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise TrailingBytesError(f"{len(data) - total} bytes past declared end")
    if value_len == 0 and msgtype != MsgType.PHASE_1B:
        raise SentinelViolationError("empty value only valid in PHASE_1B")
    return PaxosMessage(MsgType(msgtype), inst, rnd, vrnd, swid, data[HEADER_SIZE:total])
