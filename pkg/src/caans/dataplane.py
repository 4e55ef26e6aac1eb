"""Coordinator and acceptor as packet-rewriting pipelines.

Both roles obey the restriction real forwarding hardware imposes: each one
consumes a single message and emits rewritten copies of it. They never
synthesize a structurally new message: a PHASE_2A out of the coordinator is
the incoming REQUEST with msgtype/inst/rnd/swid rewritten, a PHASE_2B out of
an acceptor is the incoming PHASE_2A with msgtype/swid rewritten, and a
PHASE_1B's value field is rewritten to the stored vote (or the empty
no-vote sentinel).

Invalid or out-of-order traffic is dropped silently, as a pipeline would
drop it; per-reason drop counters and per-type emit counters are kept so
hosts can observe what happened.
"""

from __future__ import annotations

from enum import Enum

from caans.wire import MsgType, PaxosMessage

MAX_INSTANCE = 0xFFFF_FFFF
INITIAL_ROUND = 0

EMPTY_VALUE = b""


class Dest(Enum):
    """Symbolic destination groups; the hosting layer resolves them to endpoints.

    REQUESTER means "the source of the message being processed", the one
    address a rewriting pipeline always knows.
    """

    COORDINATOR = "coordinator"
    ACCEPTORS = "acceptors"
    LEARNERS = "learners"
    REQUESTER = "requester"


TO_ACCEPTORS = (Dest.ACCEPTORS,)
TO_COORDINATOR = (Dest.COORDINATOR,)
TO_REQUESTER_AND_LEARNERS = (Dest.REQUESTER, Dest.LEARNERS)
TO_LEARNERS_AND_REQUESTER = (Dest.LEARNERS, Dest.REQUESTER)

Emit = tuple[PaxosMessage, tuple[Dest, ...]]


class InstanceExhaustedError(RuntimeError):
    """The 32-bit instance counter would wrap; the coordinator halts instead."""


class Coordinator:
    """Sequences REQUESTs into consensus instances at a fixed round.

    The instance counter is monotonically increasing and never reused within
    one Coordinator lifetime; every REQUEST consumes exactly one instance.
    ``start_inst`` seeds the counter, which is how a takeover backup is
    started from an estimate of the failed coordinator's last instance.
    """

    __slots__ = ("next_inst", "rnd", "swid", "halted", "n_2a", "n_ignored")

    def __init__(self, start_inst: int = 0, swid: int = 0, rnd: int = INITIAL_ROUND):
        if not 0 <= start_inst <= MAX_INSTANCE:
            raise ValueError(f"start_inst {start_inst} outside 0..{MAX_INSTANCE}")
        self.next_inst = start_inst
        self.rnd = rnd
        self.swid = swid
        self.halted = False
        self.n_2a = 0
        self.n_ignored = 0

    def process(self, msg: PaxosMessage) -> list[Emit]:
        if msg.msgtype != MsgType.REQUEST:
            self.n_ignored += 1
            return []
        inst = self.next_inst
        if inst > MAX_INSTANCE:
            self.halted = True
            raise InstanceExhaustedError("instance counter exhausted; refusing to wrap")
        self.next_inst = inst + 1
        self.n_2a += 1
        out = PaxosMessage(MsgType.PHASE_2A, inst, self.rnd, msg.vrnd, self.swid, msg.value)
        return [(out, TO_ACCEPTORS)]

    @property
    def emitted(self) -> dict[str, int]:
        return {"phase_2a": self.n_2a} if self.n_2a else {}

    @property
    def dropped(self) -> dict[str, int]:
        return {"ignored_msgtype": self.n_ignored} if self.n_ignored else {}

    def metrics(self) -> dict:
        return {
            "emitted": self.emitted,
            "dropped": self.dropped,
            "next_inst": self.next_inst,
            "halted": self.halted,
        }


class AcceptorSlot:
    """One entry of the acceptor's bounded history: a promise and at most one vote."""

    __slots__ = ("inst_tag", "promised_rnd", "vrnd", "has_vote", "value")

    def __init__(self, inst_tag: int, promised_rnd: int):
        self.inst_tag = inst_tag
        self.promised_rnd = promised_rnd
        self.vrnd = 0
        self.has_vote = False
        self.value = EMPTY_VALUE

    def snapshot(self) -> dict:
        return {
            "inst_tag": self.inst_tag,
            "promised_rnd": self.promised_rnd,
            "vrnd": self.vrnd,
            "has_vote": self.has_vote,
            "value": self.value.hex(),
        }


class Acceptor:
    """Voting role with a capacity-bounded instance table reused modulo capacity.

    Instance i lives in slot i mod capacity. A higher-numbered instance
    arriving for a slot evicts the old occupant (the prior instance becomes
    unavailable); traffic for instances below the slot occupant or below the
    trim watermark is dropped as stale. Slots start with their promise equal
    to the coordinator's round, which is what lets round-0 PHASE_2As vote
    without any Phase 1 exchange.
    """

    __slots__ = ("swid", "capacity", "slots", "trim_watermark", "initial_rnd",
                 "n_1b", "n_2b", "n_stale", "n_low_round", "n_already_voted",
                 "n_ignored")

    def __init__(self, swid: int, capacity: int = 1024, initial_rnd: int = INITIAL_ROUND):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.swid = swid
        self.capacity = capacity
        self.initial_rnd = initial_rnd
        self.slots = [AcceptorSlot(i, initial_rnd) for i in range(capacity)]
        self.trim_watermark = 0
        self.n_1b = self.n_2b = 0
        self.n_stale = self.n_low_round = self.n_already_voted = self.n_ignored = 0

    def process(self, msg: PaxosMessage) -> list[Emit]:
        mt = msg.msgtype
        if mt != MsgType.PHASE_2A and mt != MsgType.PHASE_1A:
            self.n_ignored += 1
            return []
        inst = msg.inst
        s = self.slots[inst % self.capacity]
        floor = self.trim_watermark
        if s.inst_tag > floor:
            floor = s.inst_tag
        if inst < floor:
            self.n_stale += 1
            return []
        if inst > s.inst_tag:
            # Eviction: the previous occupant's history is gone for good.
            s.inst_tag = inst
            s.promised_rnd = self.initial_rnd
            s.vrnd = 0
            s.has_vote = False
            s.value = EMPTY_VALUE
        if mt == MsgType.PHASE_2A:
            if msg.rnd >= s.promised_rnd and (not s.has_vote or msg.rnd > s.vrnd):
                s.promised_rnd = msg.rnd
                s.vrnd = msg.rnd
                s.has_vote = True
                s.value = msg.value
                self.n_2b += 1
                out = PaxosMessage(MsgType.PHASE_2B, inst, msg.rnd, msg.vrnd,
                                   self.swid, msg.value)
                return [(out, TO_LEARNERS_AND_REQUESTER)]
            if msg.rnd < s.promised_rnd:
                self.n_low_round += 1
            else:
                self.n_already_voted += 1
            return []
        # PHASE_1A
        if msg.rnd >= s.promised_rnd:
            s.promised_rnd = msg.rnd
            self.n_1b += 1
            out = PaxosMessage(
                MsgType.PHASE_1B,
                inst,
                msg.rnd,
                s.vrnd,
                self.swid,
                s.value if s.has_vote else EMPTY_VALUE,
            )
            return [(out, TO_REQUESTER_AND_LEARNERS)]
        self.n_low_round += 1
        return []

    @property
    def emitted(self) -> dict[str, int]:
        out = {}
        if self.n_1b:
            out["phase_1b"] = self.n_1b
        if self.n_2b:
            out["phase_2b"] = self.n_2b
        return out

    @property
    def dropped(self) -> dict[str, int]:
        out = {}
        for key, n in (("stale", self.n_stale), ("low_round", self.n_low_round),
                       ("already_voted", self.n_already_voted),
                       ("ignored_msgtype", self.n_ignored)):
            if n:
                out[key] = n
        return out

    def trim(self, inst: int) -> None:
        """Advance the lowest servable instance past ``inst``. Idempotent;
        a watermark lower than the current one is ignored."""
        if inst + 1 > self.trim_watermark:
            self.trim_watermark = inst + 1

    def vote_log(self) -> dict[int, tuple[int, bytes]]:
        """Current votes by instance: {inst: (vrnd, value)}. Only in-window
        instances survive slot reuse, which is the point of the bounded table."""
        return {s.inst_tag: (s.vrnd, s.value) for s in self.slots if s.has_vote}

    def metrics(self) -> dict:
        return {
            "emitted": self.emitted,
            "dropped": self.dropped,
            "trim_watermark": self.trim_watermark,
        }
