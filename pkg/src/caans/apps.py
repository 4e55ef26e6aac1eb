"""Reference applications over the client API: echo and a replicated KV store.

The KV store is an in-memory ordered map driven entirely by the deliver
callback: operations are serialized by the client, chosen by consensus,
and applied by every replica in instance order, which keeps all replicas
byte-identical. Who answers the client is a deployment choice: one
designated replica responds, the rest apply silently.

Framing used by both applications, inside the client envelope:

    app request   reply_len(2) | reply_to utf-8 | body
    app response  "CAAP" | client_id(8) | req_seq(8) | status(1) | body_len(4) | body

``reply_to`` is an opaque routing token the host resolves (a role id in
the simulator, "host:port" in the UDP runtime). The response magic keeps
app datagrams distinguishable from consensus packets on a shared socket.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, NamedTuple, Optional

from caans.client import EnvelopeDeduper

OP_GET = 0
OP_PUT = 1
OP_DEL = 2

STATUS_OK = 0
STATUS_NOT_FOUND = 1
STATUS_MALFORMED = 2

MAX_KEY_SIZE = 255

_OP_HEAD = struct.Struct("!BB")     # kind, key_len
_OP_VLEN = struct.Struct("!I")
_RESP_HEAD = struct.Struct("!BI")   # status, value_len
_REQ_HEAD = struct.Struct("!H")     # reply_len

RESPONSE_MAGIC = b"CAAP"
_RESP_FRAME = struct.Struct("!QQBI")  # client_id, req_seq, status, body_len


class KvMalformedError(ValueError):
    pass


class KvOp(NamedTuple):
    kind: int
    key: bytes
    value: bytes = b""


def kv_encode(op: KvOp) -> bytes:
    """kind(1) | key_len(1) | key | value_len(4) | value, network byte order."""
    if op.kind not in (OP_GET, OP_PUT, OP_DEL):
        raise KvMalformedError(f"bad op kind {op.kind}")
    if not op.key:
        raise KvMalformedError("key must be non-empty")
    if len(op.key) > MAX_KEY_SIZE:
        raise KvMalformedError(f"key is {len(op.key)} bytes, max {MAX_KEY_SIZE}")
    if op.value and op.kind != OP_PUT:
        raise KvMalformedError("only PUT carries a value")
    return (_OP_HEAD.pack(op.kind, len(op.key)) + op.key
            + _OP_VLEN.pack(len(op.value)) + op.value)


def kv_decode(data: bytes) -> KvOp:
    if len(data) < _OP_HEAD.size:
        raise KvMalformedError("short op")
    kind, key_len = _OP_HEAD.unpack_from(data)
    if kind not in (OP_GET, OP_PUT, OP_DEL) or key_len == 0:
        raise KvMalformedError("bad kind or empty key")
    off = _OP_HEAD.size + key_len
    if len(data) < off + _OP_VLEN.size:
        raise KvMalformedError("truncated key")
    key = data[_OP_HEAD.size:off]
    (value_len,) = _OP_VLEN.unpack_from(data, off)
    end = off + _OP_VLEN.size + value_len
    if len(data) != end:
        raise KvMalformedError("value length mismatch")
    value = data[off + _OP_VLEN.size:end]
    if value and kind != OP_PUT:
        raise KvMalformedError("only PUT carries a value")
    return KvOp(kind, key, value)


class KvStore:
    """In-memory ordered map; state is a pure function of the applied op sequence."""

    def __init__(self):
        self.data: dict[bytes, bytes] = {}
        self.applied_count = 0

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.data):
            h.update(struct.pack("!I", len(key)))
            h.update(key)
            h.update(struct.pack("!I", len(self.data[key])))
            h.update(self.data[key])
        return h.hexdigest()


def kv_apply(store: KvStore, op_bytes: bytes) -> bytes:
    """Apply one serialized op; returns status(1) | value_len(4) | value.

    Raises KvMalformedError on undecodable bytes (state untouched). Runs
    inside the deliver callback, so every replica applies the identical
    sequence.
    """
    op = kv_decode(op_bytes)
    store.applied_count += 1
    if op.kind == OP_PUT:
        store.data[op.key] = op.value
        return _RESP_HEAD.pack(STATUS_OK, 0)
    if op.kind == OP_DEL:
        store.data.pop(op.key, None)
        return _RESP_HEAD.pack(STATUS_OK, 0)
    value = store.data.get(op.key)
    if value is None:
        return _RESP_HEAD.pack(STATUS_NOT_FOUND, 0)
    return _RESP_HEAD.pack(STATUS_OK, len(value)) + value


def parse_kv_response(data: bytes) -> tuple[int, bytes]:
    if len(data) < _RESP_HEAD.size:
        raise KvMalformedError("short response")
    status, value_len = _RESP_HEAD.unpack_from(data)
    value = data[_RESP_HEAD.size:]
    if len(value) != value_len:
        raise KvMalformedError("response length mismatch")
    return status, value


class InstanceOrderBuffer:
    """Reorders out-of-order deliveries into a contiguous instance sequence.

    ``feed`` returns every (inst, value) that became releasable, in
    instance order. A hole stalls release until the missing instance is
    delivered (gap recovery's job).
    """

    def __init__(self, start: int = 0):
        self.next_inst = start
        self.held: dict[int, bytes] = {}

    def feed(self, inst: int, value: bytes) -> list[tuple[int, bytes]]:
        if inst < self.next_inst or inst in self.held:
            return []
        self.held[inst] = value
        out = []
        while self.next_inst in self.held:
            out.append((self.next_inst, self.held.pop(self.next_inst)))
            self.next_inst += 1
        return out


def encode_app_request(reply_to: str, body: bytes) -> bytes:
    token = reply_to.encode()
    return _REQ_HEAD.pack(len(token)) + token + body


def decode_app_request(data: bytes) -> tuple[str, bytes]:
    if len(data) < _REQ_HEAD.size:
        raise KvMalformedError("short app request")
    (reply_len,) = _REQ_HEAD.unpack_from(data)
    off = _REQ_HEAD.size + reply_len
    if len(data) < off:
        raise KvMalformedError("truncated reply token")
    return data[_REQ_HEAD.size:off].decode(), data[off:]


def encode_app_response(client_id: int, req_seq: int, status: int, body: bytes) -> bytes:
    return RESPONSE_MAGIC + _RESP_FRAME.pack(client_id, req_seq, status, len(body)) + body


def decode_app_response(data: bytes) -> tuple[int, int, int, bytes]:
    """Returns (client_id, req_seq, status, body)."""
    if not data.startswith(RESPONSE_MAGIC):
        raise KvMalformedError("missing response magic")
    off = len(RESPONSE_MAGIC)
    if len(data) < off + _RESP_FRAME.size:
        raise KvMalformedError("short app response")
    client_id, req_seq, status, body_len = _RESP_FRAME.unpack_from(data, off)
    body = data[off + _RESP_FRAME.size:]
    if len(body) != body_len:
        raise KvMalformedError("app response length mismatch")
    return client_id, req_seq, status, body


SendFn = Callable[[str, bytes], None]


class EchoResponder:
    """Echoes each first-sighted request body back to its reply address."""

    def __init__(self, send: Optional[SendFn] = None, responder: bool = True):
        self.dedup = EnvelopeDeduper()
        self.send = send
        self.responder = responder
        self.echoed = 0

    def on_deliver(self, value: bytes, inst: int):
        parsed = self.dedup.accept(value)
        if parsed is None:
            return
        client_id, req_seq, payload = parsed
        try:
            reply_to, body = decode_app_request(payload)
        except KvMalformedError:
            return
        self.echoed += 1
        if self.responder and self.send is not None:
            self.send(reply_to, encode_app_response(client_id, req_seq, STATUS_OK, body))


class KvReplica:
    """One replica of the KV store, fed by a learner's deliver callback.

    Deliveries are re-sequenced into instance order before applying, since
    the store needs sequential semantics; duplicates and protocol filler
    (no-ops) consume their instance without touching the store.
    """

    def __init__(self, send: Optional[SendFn] = None, responder: bool = False):
        self.store = KvStore()
        self.dedup = EnvelopeDeduper()
        self.order = InstanceOrderBuffer()
        self.send = send
        self.responder = responder
        self.skipped = 0

    def on_deliver(self, value: bytes, inst: int):
        for _, val in self.order.feed(inst, value):
            self._apply(val)

    def _apply(self, value: bytes):
        parsed = self.dedup.accept(value)
        if parsed is None:
            self.skipped += 1
            return
        client_id, req_seq, payload = parsed
        try:
            reply_to, body = decode_app_request(payload)
        except KvMalformedError:
            self.skipped += 1
            return
        try:
            response = kv_apply(self.store, body)
        except KvMalformedError:
            response = _RESP_HEAD.pack(STATUS_MALFORMED, 0)
        if self.responder and self.send is not None:
            self.send(reply_to,
                      encode_app_response(client_id, req_seq, response[0], response))

    def digest(self) -> str:
        return self.store.digest()
