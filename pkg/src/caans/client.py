"""Software proposer and learner libraries.

These are the two roles that stay on servers: the proposer turns
application values into REQUEST packets (and re-transmits them until its
value comes back out of the protocol), and the learner counts acceptor
votes, delivering a value to the application exactly once per instance the
moment a quorum agrees.

Both classes are sans-IO state machines. They never touch a socket or a
clock of their own; a host (the simulator or the UDP runtime) feeds them
messages and the current time, drains their outbox of (message,
destinations) pairs, and wakes them up when ``next_wakeup()`` says so.
That keeps one implementation of the protocol logic shared by both hosts.

Application values travel inside a 16-byte envelope (client_id, req_seq)
so that a value chosen twice (the unavoidable result of a retransmitted
request) can be recognized and surfaced to the application only once.
Values shorter than the envelope (such as the recovery no-op) are protocol
filler by construction and are never surfaced.
"""

from __future__ import annotations

import heapq
import itertools
import struct
from enum import Enum
from typing import Callable, NamedTuple, Optional

from caans.dataplane import TO_ACCEPTORS, TO_COORDINATOR, Emit
from caans.wire import EmptyValueError, MAX_VALUE_SIZE, MsgType, PaxosMessage

ENVELOPE_SIZE = 16
MAX_SUBMIT_SIZE = MAX_VALUE_SIZE - ENVELOPE_SIZE
MAX_ROUND = 0xFFFF

# Shorter than any envelope, so apps can never mistake it for a client value.
NOOP_VALUE = b"\x00"

_ENVELOPE = struct.Struct("!QQ")
_pack_envelope = _ENVELOPE.pack


class ValueTooLargeError(ValueError):
    pass


def wrap_envelope(client_id: int, req_seq: int, payload: bytes) -> bytes:
    return _pack_envelope(client_id, req_seq) + payload


def unwrap_envelope(value: bytes):
    """Return (client_id, req_seq, payload), or None for sub-envelope filler."""
    if len(value) < ENVELOPE_SIZE:
        return None
    client_id, req_seq = _ENVELOPE.unpack_from(value)
    return client_id, req_seq, value[ENVELOPE_SIZE:]


class EnvelopeDeduper:
    """Suppresses repeats of one (client_id, req_seq) across instances."""

    __slots__ = ("seen",)

    def __init__(self):
        self.seen: set[tuple[int, int]] = set()

    def accept(self, value: bytes):
        """First sighting: (client_id, req_seq, payload). Repeat or filler: None."""
        parsed = unwrap_envelope(value)
        if parsed is None:
            return None
        key = (parsed[0], parsed[1])
        if key in self.seen:
            return None
        self.seen.add(key)
        return parsed


class DeliverEvent(NamedTuple):
    inst: int
    rnd: int
    value: bytes


class LearnerTally:
    """Per-instance vote bookkeeping with quorum detection.

    A vote is one PHASE_2B; votes are counted per (instance, round) and a
    value is delivered the moment f+1 distinct acceptors have voted for it
    within one round. Delivery happens at most once per instance. Two
    differing values for the same (instance, round) are a protocol
    violation: the offending vote is recorded in ``mismatches`` and never
    counted.
    """

    __slots__ = ("quorum", "records", "delivered", "highest_contiguous",
                 "max_delivered", "mismatches")

    def __init__(self, quorum: int):
        if quorum < 1:
            raise ValueError("quorum must be >= 1")
        self.quorum = quorum
        # inst -> {rnd: [value, set of voter swids]}
        self.records: dict[int, dict[int, list]] = {}
        self.delivered: dict[int, tuple[int, bytes]] = {}
        self.highest_contiguous = 0
        self.max_delivered = -1
        self.mismatches: list[tuple[int, int, int, bytes]] = []

    def process(self, msg: PaxosMessage) -> list[DeliverEvent]:
        if msg.msgtype != MsgType.PHASE_2B:
            return []
        inst = msg.inst
        records = self.records
        rounds = records.get(inst)
        if rounds is None:
            rounds = records[inst] = {}
        entry = rounds.get(msg.rnd)
        if entry is None:
            entry = rounds[msg.rnd] = [msg.value, {msg.swid}]
        elif entry[0] != msg.value:
            self.mismatches.append((inst, msg.rnd, msg.swid, msg.value))
            return []
        else:
            entry[1].add(msg.swid)
        if inst in self.delivered or len(entry[1]) < self.quorum:
            return []
        self.delivered[inst] = (msg.rnd, msg.value)
        if inst > self.max_delivered:
            self.max_delivered = inst
        hc = self.highest_contiguous
        delivered = self.delivered
        while hc in delivered:
            hc += 1
        self.highest_contiguous = hc
        return [DeliverEvent(inst, msg.rnd, msg.value)]

    def voters(self, inst: int) -> int:
        """Distinct voters behind the delivered round of ``inst`` (0 if undelivered)."""
        if inst not in self.delivered:
            return 0
        rnd = self.delivered[inst][0]
        return len(self.records[inst][rnd][1])

    def gaps(self) -> list[int]:
        """Undelivered instances below the delivery frontier."""
        delivered = self.delivered
        return [i for i in range(self.highest_contiguous, self.max_delivered)
                if i not in delivered]


class RecoveryOutcome(Enum):
    PENDING = "pending"
    DONE = "done"
    TIMEOUT = "timeout"
    ROUND_EXHAUSTED = "round_exhausted"


class RecoveryTask:
    """One full two-phase execution to learn (or settle) a single instance.

    Phase 1 asks every acceptor what it has voted for the instance; on a
    quorum of replies the task proposes the highest-round vote it saw, or
    the no-op if nobody voted. Phase 2 is a normal accept round. Each
    attempt uses a fresh round from the owner's disjoint round space, so
    concurrent recoverers can never collide on a round number.
    """

    __slots__ = ("inst", "noop", "quorum", "index", "stride", "swid",
                 "attempt_limit", "attempt", "rnd", "phase", "replies",
                 "votes", "chosen", "outcome", "result")

    def __init__(self, inst, noop, quorum, *, index=0, stride=1, swid=0,
                 max_attempts=10, start_attempt=0):
        if not noop:
            raise EmptyValueError("no-op value must be non-empty")
        self.inst = inst
        self.noop = noop
        self.quorum = quorum
        self.index = index
        self.stride = stride
        self.swid = swid
        self.attempt_limit = start_attempt + max_attempts
        self.attempt = start_attempt
        self.rnd = 0
        self.phase = 0
        self.replies: dict[int, tuple[int, bytes]] = {}
        self.votes: set[int] = set()
        self.chosen: Optional[bytes] = None
        self.outcome = RecoveryOutcome.PENDING
        self.result: Optional[bytes] = None

    @property
    def done(self) -> bool:
        return self.outcome is not RecoveryOutcome.PENDING

    def start(self, now: float) -> list[Emit]:
        return self._begin_attempt()

    def _begin_attempt(self) -> list[Emit]:
        self.attempt += 1
        rnd = self.attempt * self.stride + self.index
        if rnd > MAX_ROUND:
            self.outcome = RecoveryOutcome.ROUND_EXHAUSTED
            return []
        self.rnd = rnd
        self.phase = 1
        self.replies = {}
        self.votes = set()
        self.chosen = None
        # The 1A carries the no-op so the packet has a payload for the
        # acceptor to rewrite; the 1B will replace it with the stored vote.
        msg = PaxosMessage(MsgType.PHASE_1A, self.inst, rnd, 0, self.swid, self.noop)
        return [(msg, TO_ACCEPTORS)]

    def on_message(self, msg: PaxosMessage, now: float) -> list[Emit]:
        if self.done or msg.inst != self.inst or msg.rnd != self.rnd:
            return []
        if msg.msgtype == MsgType.PHASE_1B and self.phase == 1:
            self.replies[msg.swid] = (msg.vrnd, msg.value)
            if len(self.replies) >= self.quorum:
                voted = [pair for pair in self.replies.values() if pair[1]]
                self.chosen = max(voted)[1] if voted else self.noop
                self.phase = 2
                out = PaxosMessage(MsgType.PHASE_2A, self.inst, self.rnd, 0,
                                   self.swid, self.chosen)
                return [(out, TO_ACCEPTORS)]
        elif msg.msgtype == MsgType.PHASE_2B and self.phase == 2:
            self.votes.add(msg.swid)
            if len(self.votes) >= self.quorum:
                self.outcome = RecoveryOutcome.DONE
                self.result = self.chosen
        return []

    def on_timeout(self, now: float) -> list[Emit]:
        if self.done:
            return []
        if self.attempt >= self.attempt_limit:
            self.outcome = RecoveryOutcome.TIMEOUT
            return []
        return self._begin_attempt()


class RecoveryManager:
    """Owns a set of RecoveryTasks plus their retry timers and outbox."""

    def __init__(self, quorum, swid, *, index=0, stride=1, timeout=0.05, max_attempts=10):
        self.quorum = quorum
        self.swid = swid
        self.index = index
        self.stride = stride
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.tasks: dict[int, RecoveryTask] = {}
        self.outbox: list[Emit] = []
        self._timers: list = []
        self._tick = itertools.count()

    def active(self, inst: int) -> bool:
        task = self.tasks.get(inst)
        return task is not None and not task.done

    def recover(self, inst: int, noop: bytes, now: float) -> RecoveryTask:
        prior = self.tasks.get(inst)
        if prior is not None and not prior.done:
            return prior
        # resume above the prior task's rounds: acceptors may hold promises
        # from it, and lower rounds would be rejected on sight
        task = RecoveryTask(inst, noop, self.quorum, index=self.index,
                            stride=self.stride, swid=self.swid,
                            max_attempts=self.max_attempts,
                            start_attempt=prior.attempt if prior is not None else 0)
        self.tasks[inst] = task
        self.outbox.extend(task.start(now))
        self._arm(task, now)
        return task

    def _arm(self, task: RecoveryTask, now: float):
        if not task.done:
            heapq.heappush(self._timers,
                           (now + self.timeout, next(self._tick), task.inst, task.attempt))

    def on_message(self, msg: PaxosMessage, now: float):
        task = self.tasks.get(msg.inst)
        if task is not None and not task.done:
            self.outbox.extend(task.on_message(msg, now))

    def next_wakeup(self):
        return self._timers[0][0] if self._timers else None

    def on_wakeup(self, now: float):
        while self._timers and self._timers[0][0] <= now:
            _, _, inst, attempt = heapq.heappop(self._timers)
            task = self.tasks.get(inst)
            if task is None or task.done or task.attempt != attempt:
                continue
            self.outbox.extend(task.on_timeout(now))
            self._arm(task, now)

    def take_outbox(self) -> list[Emit]:
        out = self.outbox
        self.outbox = []
        return out


class _Pending:
    __slots__ = ("req_seq", "envelope", "submit_time", "retries")

    def __init__(self, req_seq, envelope, submit_time):
        self.req_seq = req_seq
        self.envelope = envelope
        self.submit_time = submit_time
        self.retries = 0


class Proposer:
    """Client-side request state: envelopes, retransmission, recovery.

    ``submit`` queues a REQUEST for the coordinator and arms a retransmit
    timer; the request stays pending until the value is seen delivered (via
    a co-located learner or an application response) or it has been
    retransmitted ``max_retries`` times, after which it lands in
    ``failed``. ``recover`` runs the two-phase read-or-settle protocol
    against the acceptors directly.
    """

    def __init__(self, client_id: int, *, swid: int = 0, quorum: int = 1,
                 retransmit_timeout: Optional[float] = 0.05, max_retries: int = 10,
                 recovery_index: int = 0, recovery_stride: int = 1,
                 recovery_max_attempts: int = 10):
        self.client_id = client_id
        self.swid = swid
        self.retransmit_timeout = retransmit_timeout
        self.max_retries = max_retries
        self.next_req_seq = 0
        self.pending: dict[int, _Pending] = {}
        self.failed: dict[int, _Pending] = {}
        self.resolved = 0
        self.retransmits = 0
        self.outbox: list[Emit] = []
        self._timers: list = []
        self._tick = itertools.count()
        self.recovery = RecoveryManager(
            quorum, swid, index=recovery_index, stride=recovery_stride,
            timeout=retransmit_timeout or 0.05, max_attempts=recovery_max_attempts)
        self.on_failed: Optional[Callable[[int, bytes], None]] = None

    def submit(self, value: bytes, now: float = 0.0) -> int:
        """Queue ``value`` for consensus; returns the request sequence number."""
        if not value:
            raise EmptyValueError("cannot submit an empty value")
        if len(value) > MAX_SUBMIT_SIZE:
            raise ValueTooLargeError(
                f"value is {len(value)} bytes, max {MAX_SUBMIT_SIZE} "
                f"({MAX_VALUE_SIZE} minus the {ENVELOPE_SIZE}-byte envelope)")
        req_seq = self.next_req_seq
        self.next_req_seq = req_seq + 1
        entry = _Pending(req_seq, wrap_envelope(self.client_id, req_seq, value), now)
        self.pending[req_seq] = entry
        self._send(entry, now)
        return req_seq

    def _send(self, entry: _Pending, now: float):
        msg = PaxosMessage(MsgType.REQUEST, 0, 0, 0, self.swid, entry.envelope)
        self.outbox.append((msg, TO_COORDINATOR))
        timeout = self.retransmit_timeout
        if timeout is not None:
            heapq.heappush(self._timers, (now + timeout, next(self._tick),
                                          entry.req_seq, entry.retries))

    def recover(self, inst: int, noop_value: bytes, now: float = 0.0) -> RecoveryTask:
        return self.recovery.recover(inst, noop_value, now)

    def on_message(self, msg: PaxosMessage, now: float = 0.0):
        """Feed a PHASE_1B/PHASE_2B that arrived addressed to this requester."""
        self.recovery.on_message(msg, now)

    def on_delivered(self, inst: int, value: bytes, now: float = 0.0):
        """Delivery feedback from a co-located learner; resolves a pending request."""
        parsed = unwrap_envelope(value)
        if parsed is None or parsed[0] != self.client_id:
            return None
        return self.resolve(parsed[1])

    def resolve(self, req_seq: int):
        """Mark a request as done (value observed chosen). Idempotent."""
        entry = self.pending.pop(req_seq, None)
        if entry is None:
            return None
        self.resolved += 1
        return req_seq

    def next_wakeup(self):
        mine = self._timers[0][0] if self._timers else None
        theirs = self.recovery.next_wakeup()
        if mine is None:
            return theirs
        if theirs is None:
            return mine
        return min(mine, theirs)

    def on_wakeup(self, now: float):
        while self._timers and self._timers[0][0] <= now:
            _, _, req_seq, retries = heapq.heappop(self._timers)
            entry = self.pending.get(req_seq)
            if entry is None or entry.retries != retries:
                continue  # resolved, or a newer send owns the timer
            if entry.retries >= self.max_retries:
                del self.pending[req_seq]
                self.failed[req_seq] = entry
                if self.on_failed is not None:
                    self.on_failed(req_seq, entry.envelope[ENVELOPE_SIZE:])
                continue
            entry.retries += 1
            self.retransmits += 1
            self._send(entry, now)
        self.recovery.on_wakeup(now)

    def take_outbox(self) -> list[Emit]:
        out = self.outbox
        self.outbox = []
        out.extend(self.recovery.take_outbox())
        return out

    def metrics(self) -> dict:
        return {
            "submitted": self.next_req_seq,
            "resolved": self.resolved,
            "retransmits": self.retransmits,
            "failed": len(self.failed),
            "pending": len(self.pending),
        }


class Learner:
    """Vote-counting role plus its application-facing deliver callbacks.

    PHASE_2B votes feed the tally; registered callbacks fire exactly once
    per delivered instance, in quorum-arrival order (which is not instance
    order; later instances may finish first). PHASE_1Bs only matter while
    this learner has a recovery in flight for their instance.
    """

    def __init__(self, quorum: int, *, swid: int = 0,
                 recovery: Optional[RecoveryManager] = None):
        self.tally = LearnerTally(quorum)
        self.swid = swid
        self.recovery = recovery
        self.callbacks: list[Callable[[bytes, int], None]] = []

    def register_deliver(self, callback: Callable[[bytes, int], None]):
        """Register cb(value, instance); invoked once per delivered instance,
        from the learner's processing context (must not block)."""
        self.callbacks.append(callback)

    def process(self, msg: PaxosMessage, now: float = 0.0) -> list[DeliverEvent]:
        recovery = self.recovery
        if msg.msgtype == MsgType.PHASE_2B:
            if recovery is not None and recovery.tasks:
                recovery.on_message(msg, now)
            events = self.tally.process(msg)
            for ev in events:
                for cb in self.callbacks:
                    cb(ev.value, ev.inst)
            return events
        if msg.msgtype == MsgType.PHASE_1B and recovery is not None \
                and recovery.active(msg.inst):
            recovery.on_message(msg, now)
        return []

    def recover(self, inst: int, noop_value: bytes, now: float = 0.0) -> RecoveryTask:
        if self.recovery is None:
            raise RuntimeError("learner built without a RecoveryManager")
        return self.recovery.recover(inst, noop_value, now)

    def gaps(self) -> list[int]:
        return self.tally.gaps()

    def next_wakeup(self):
        return self.recovery.next_wakeup() if self.recovery else None

    def on_wakeup(self, now: float):
        if self.recovery:
            self.recovery.on_wakeup(now)

    def take_outbox(self) -> list[Emit]:
        return self.recovery.take_outbox() if self.recovery else []


# The classic three-call replication API, plus the two explicit helpers.

def submit(ctx: Proposer, value: bytes, now: float = 0.0) -> int:
    return ctx.submit(value, now)


def recover(ctx, inst: int, noop_value: bytes, now: float = 0.0) -> RecoveryTask:
    return ctx.recover(inst, noop_value, now)


def register_deliver(ctx: Learner, callback: Callable[[bytes, int], None]):
    ctx.register_deliver(callback)


def learner_gaps(tally) -> list[int]:
    return tally.gaps()
