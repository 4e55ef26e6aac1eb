"""Deterministic discrete-event network simulator hosting all roles.

One virtual-time event queue drives everything; ties break on insertion
sequence, so a trace is a pure function of (topology, fault schedule,
seed). Message transit applies drop, then duplication, then latency plus
uniform jitter, all drawn from a single seeded generator in event order.

Faults are scheduled events: kill_role makes a role silently discard its
future receptions, revive_role brings it back with reinitialized state
(non-persistent memory, the pessimistic case), start_backup_coordinator
spins up a software coordinator seeded with an instance estimate and
re-routes proposer REQUESTs to it, and trim advances one acceptor's
watermark.
"""

from __future__ import annotations

import json
import random
import struct
from heapq import heappop, heappush
from dataclasses import dataclass, field
from typing import Optional

from caans import apps
from caans.client import Learner, NOOP_VALUE, Proposer, RecoveryManager
from caans.dataplane import (
    Acceptor,
    Coordinator,
    Dest,
    InstanceExhaustedError,
    TO_ACCEPTORS,
    TO_COORDINATOR,
    TO_LEARNERS_AND_REQUESTER,
    TO_REQUESTER_AND_LEARNERS,
)
from caans.wire import MsgType, PaxosMessage

DEFAULT_LINK_LATENCY = 0.0001

_PAYLOAD_PACK = struct.Struct("!dI").pack


class BadTopologyError(ValueError):
    pass


class PastTimeError(ValueError):
    pass


class LinkParams(tuple):
    """(base_latency, jitter, drop_prob, dup_prob); jitter is uniform [0, jitter]."""

    __slots__ = ()

    def __new__(cls, base_latency=DEFAULT_LINK_LATENCY, jitter=0.0,
                drop_prob=0.0, dup_prob=0.0):
        if not 0.0 <= drop_prob <= 1.0 or not 0.0 <= dup_prob <= 1.0:
            raise BadTopologyError("probabilities must be within [0, 1]")
        if base_latency < 0 or jitter < 0:
            raise BadTopologyError("latency and jitter must be >= 0")
        return tuple.__new__(cls, (base_latency, jitter, drop_prob, dup_prob))

    base_latency = property(lambda self: self[0])
    jitter = property(lambda self: self[1])
    drop_prob = property(lambda self: self[2])
    dup_prob = property(lambda self: self[3])


@dataclass
class RoleSpec:
    kind: str                       # proposer | coordinator | acceptor | learner
    id: str
    attach: Optional[str] = None    # proposer: co-located learner id
    app: Optional[str] = None       # learner: None | "echo" | "kv"
    responder: bool = False         # learner: answers clients for its app
    swid: Optional[int] = None


@dataclass
class Topology:
    f: int
    roles: list[RoleSpec]
    links: dict = field(default_factory=dict)   # (src,dst) -> LinkParams
    default_link: LinkParams = field(default_factory=LinkParams)

    @property
    def quorum(self) -> int:
        return self.f + 1

    def validate(self):
        ids = [r.id for r in self.roles]
        if len(set(ids)) != len(ids):
            raise BadTopologyError("role ids must be unique")
        kinds = ("proposer", "coordinator", "acceptor", "learner")
        unknown = [r.kind for r in self.roles if r.kind not in kinds]
        if unknown:
            raise BadTopologyError(f"unknown role kinds: {unknown}")
        n = sum(1 for r in self.roles if r.kind == "acceptor")
        if n != 2 * self.f + 1:
            raise BadTopologyError(f"{n} acceptors but f={self.f}; need n = 2f+1")
        if sum(1 for r in self.roles if r.kind == "coordinator") != 1:
            raise BadTopologyError("exactly one initial coordinator required")
        if not any(r.kind == "learner" for r in self.roles):
            raise BadTopologyError("at least one learner required")
        known = set(ids)
        for r in self.roles:
            if r.attach is not None and r.attach not in known:
                raise BadTopologyError(f"{r.id} attaches to unknown role {r.attach}")
        for (src, dst) in self.links:
            if src not in known or dst not in known:
                raise BadTopologyError(f"link ({src},{dst}) references unknown role")
        swids = [r.swid for r in self.roles if r.swid is not None]
        if len(set(swids)) != len(swids):
            raise BadTopologyError("explicit swids must be unique")


def simple_topology(f=1, proposers=1, learners=2, link: Optional[LinkParams] = None,
                    attach=True, app=None, responder_id=None) -> Topology:
    """The standard desk topology: one coordinator, 2f+1 acceptors, and the
    requested proposers/learners. Proposers co-locate with learner 0 when
    ``attach`` is set."""
    roles = [RoleSpec("coordinator", "c0")]
    roles += [RoleSpec("acceptor", f"a{i}") for i in range(2 * f + 1)]
    for i in range(learners):
        lid = f"l{i}"
        responder = (responder_id == lid) if responder_id else (app is not None and i == 0)
        roles.append(RoleSpec("learner", lid, app=app, responder=responder))
    for i in range(proposers):
        roles.append(RoleSpec("proposer", f"p{i}", attach="l0" if attach else None))
    return Topology(f=f, roles=roles, links={}, default_link=link or LinkParams())


FAULT_ACTIONS = ("kill_role", "revive_role", "start_backup_coordinator", "trim")


@dataclass
class FaultEvent:
    time: float
    action: str
    target: str
    inst: Optional[int] = None        # trim
    start_inst: Optional[int] = None  # start_backup_coordinator

    def validate(self):
        if self.time < 0:
            raise ValueError("fault time must be non-negative")
        if self.action not in FAULT_ACTIONS:
            raise ValueError(f"unknown fault action {self.action}")
        if self.action == "trim" and self.inst is None:
            raise ValueError("trim fault needs inst")
        if self.action == "start_backup_coordinator" and self.start_inst is None:
            raise ValueError("start_backup_coordinator needs start_inst")


@dataclass
class Burst:
    start: float
    count: int
    interval: float = 0.001


@dataclass
class Workload:
    mode: str = "open"               # open | closed | none
    bursts: list = field(default_factory=list)
    clients: int = 1                 # closed mode: logical closed-loop clients
    count: int = 0                   # closed mode: total messages across clients
    value_size: int = 16
    start: float = 0.0

    @classmethod
    def open_loop(cls, count, interval=0.001, start=0.0, value_size=16):
        return cls(mode="open", bursts=[Burst(start, count, interval)],
                   value_size=value_size)

    @classmethod
    def closed_loop(cls, clients, count, value_size=16, start=0.0):
        return cls(mode="closed", clients=clients, count=count,
                   value_size=value_size, start=start)


@dataclass
class SimTrace:
    """What a run produced: the event log (when recorded), final per-role
    counters and states, each learner's delivery map, and client-side
    latency/failure bookkeeping."""

    events: list
    counters: dict
    deliveries: dict            # learner id -> {inst: (rnd, value)}
    mismatches: int
    latencies: dict             # proposer id -> [rtt seconds]
    failed: dict                # proposer id -> count
    final_states: dict
    end_time: float

    def summary(self) -> dict:
        return {
            "end_time": self.end_time,
            "mismatches": self.mismatches,
            "counters": self.counters,
            "delivered": {lid: len(d) for lid, d in self.deliveries.items()},
            "failed": self.failed,
        }


def _msg_dict(msg: PaxosMessage) -> dict:
    return {"msgtype": int(msg.msgtype), "inst": msg.inst, "rnd": msg.rnd,
            "vrnd": msg.vrnd, "swid": msg.swid, "value": msg.value.hex()}


def trace_to_jsonl(trace: SimTrace) -> str:
    lines = [json.dumps(ev, sort_keys=True, separators=(",", ":"))
             for ev in trace.events]
    lines.append(json.dumps({"summary": trace.summary()}, sort_keys=True,
                            separators=(",", ":")))
    return "\n".join(lines) + "\n"


# Event queue entries are (time, seq, kind, ...); seq is unique so tuple
# comparison never reaches the payload. Kind 0 is message delivery (the hot
# path, dispatched inline by the run loop); kind 1 is a generic callback.
_EV_DELIVER = 0
_EV_CALL = 1


class _Node:
    __slots__ = ("sim", "id", "kind", "alive", "counters", "armed_at", "links_to")

    def __init__(self, sim, spec):
        self.sim = sim
        self.id = spec.id
        self.kind = spec.kind
        self.alive = True
        self.counters = {}
        self.armed_at = None
        self.links_to = {}  # dst id -> LinkParams, lazily resolved

    def bump(self, key, n=1):
        c = self.counters
        c[key] = c.get(key, 0) + n

    def next_wakeup(self):
        return None

    def on_wakeup(self, now):
        pass

    def final_state(self) -> dict:
        return {}


class _CoordinatorNode(_Node):
    __slots__ = ("core",)

    def __init__(self, sim, spec, start_inst=0):
        super().__init__(sim, spec)
        self.core = Coordinator(start_inst=start_inst, swid=spec.swid)

    def receive(self, now, msg, src):
        core = self.core
        if core.halted:
            self.bump("halted_drop")
            return
        try:
            outputs = core.process(msg)
        except InstanceExhaustedError:
            self.bump("instance_exhausted")
            return
        if outputs:
            self.sim._emit(self, outputs, src, now)

    def final_state(self):
        return self.core.metrics()


class _AcceptorNode(_Node):
    __slots__ = ("core",)

    def __init__(self, sim, spec):
        super().__init__(sim, spec)
        self.core = Acceptor(swid=spec.swid, capacity=sim.capacity)

    def receive(self, now, msg, src):
        outputs = self.core.process(msg)
        if outputs:
            self.sim._emit(self, outputs, src, now)

    def reinitialize(self):
        self.core = Acceptor(swid=self.core.swid, capacity=self.sim.capacity)

    def final_state(self):
        return self.core.metrics()


class _LearnerNode(_Node):
    __slots__ = ("learner", "app", "attached", "gap_check_pending",
                 "n_recv_2b", "n_recv_1b", "n_deliver")

    def __init__(self, sim, spec, recovery_index, recovery_stride):
        super().__init__(sim, spec)
        recovery = RecoveryManager(
            sim.topology.quorum, spec.swid, index=recovery_index,
            stride=recovery_stride, timeout=sim.retransmit_timeout or 0.05,
            max_attempts=sim.max_retries)
        self.learner = Learner(sim.topology.quorum, swid=spec.swid, recovery=recovery)
        self.attached = []  # proposer nodes co-located here
        self.gap_check_pending = False
        self.n_recv_2b = self.n_recv_1b = self.n_deliver = 0
        send = lambda reply_to, data: sim._send_app(self, reply_to, data)
        if spec.app == "echo":
            self.app = apps.EchoResponder(send=send, responder=spec.responder)
        elif spec.app == "kv":
            self.app = apps.KvReplica(send=send, responder=spec.responder)
        elif spec.app is None:
            self.app = None
        else:
            raise BadTopologyError(f"unknown app {spec.app!r} on {spec.id}")

    def receive(self, now, msg, src):
        mt = msg.msgtype
        if mt == MsgType.PHASE_2B:
            self.n_recv_2b += 1
        elif mt == MsgType.PHASE_1B:
            self.n_recv_1b += 1
        sim = self.sim
        learner = self.learner
        events = learner.process(msg, now)
        if events:
            self.n_deliver += len(events)
            for ev in events:
                if sim.record_events:
                    sim.events.append({"t": now, "ev": "deliver", "role": self.id,
                                       "inst": ev.inst, "rnd": ev.rnd,
                                       "value": ev.value.hex()})
                if self.app is not None:
                    self.app.on_deliver(ev.value, ev.inst)
                for pnode in self.attached:
                    pnode.notify_delivered(now, ev)
            if sim.gap_recovery_delay is not None and not self.gap_check_pending \
                    and learner.tally.gaps():
                self.gap_check_pending = True
                sim._at(now + sim.gap_recovery_delay, self._gap_check)
        recovery = learner.recovery
        if recovery.outbox:
            sim._emit(self, recovery.take_outbox(), None, now)
        if recovery._timers:
            sim._arm(self)

    def _gap_check(self, now):
        self.gap_check_pending = False
        if not self.alive:
            return
        learner = self.learner
        recovery = learner.recovery
        started = False
        for inst in learner.tally.gaps():
            if not recovery.active(inst):
                learner.recover(inst, self.sim.noop_value, now)
                self.bump("recover_started")
                started = True
        if started:
            if recovery.outbox:
                self.sim._emit(self, recovery.take_outbox(), None, now)
            self.sim._arm(self)

    def reinitialize(self):
        recovery = self.learner.recovery
        self.learner = Learner(self.sim.topology.quorum, swid=self.learner.swid,
                               recovery=RecoveryManager(
                                   recovery.quorum, recovery.swid,
                                   index=recovery.index, stride=recovery.stride,
                                   timeout=recovery.timeout,
                                   max_attempts=recovery.max_attempts))
        app = self.app
        if app is not None:
            # replica restarts empty; gap recovery re-learns what it missed
            self.app = type(app)(send=app.send, responder=app.responder)

    def next_wakeup(self):
        return self.learner.next_wakeup()

    def on_wakeup(self, now):
        self.learner.on_wakeup(now)
        recovery = self.learner.recovery
        if recovery.outbox:
            self.sim._emit(self, recovery.take_outbox(), None, now)

    def final_state(self):
        tally = self.learner.tally
        return {"delivered": len(tally.delivered),
                "highest_contiguous": tally.highest_contiguous,
                "gaps": tally.gaps(),
                "mismatches": len(tally.mismatches)}


class _ProposerNode(_Node):
    __slots__ = ("proposer", "attach", "latencies", "submitted", "chains",
                 "chain_of_seq", "sent_at", "app_mode")

    def __init__(self, sim, spec, recovery_index, recovery_stride):
        super().__init__(sim, spec)
        self.proposer = Proposer(
            client_id=spec.swid, swid=spec.swid, quorum=sim.topology.quorum,
            retransmit_timeout=sim.retransmit_timeout, max_retries=sim.max_retries,
            recovery_index=recovery_index, recovery_stride=recovery_stride,
            recovery_max_attempts=sim.max_retries)
        self.attach = spec.attach
        self.latencies = []
        self.submitted = []          # request bodies, in submit order
        self.chains = {}             # chain id -> remaining count
        self.chain_of_seq = {}       # req_seq -> chain id
        self.sent_at = {}            # req_seq -> submit time
        self.app_mode = any(r.kind == "learner" and r.app for r in sim.topology.roles)

    # -- traffic in ---------------------------------------------------------

    def receive(self, now, msg, src):
        self.proposer.on_message(msg, now)
        self._drain(now)

    def receive_app(self, now, data, src):
        try:
            client_id, req_seq, status, body = apps.decode_app_response(data)
        except apps.KvMalformedError:
            self.bump("bad_app_response")
            return
        if client_id != self.proposer.client_id:
            return
        self.bump("app_response")
        self.proposer.resolve(req_seq)
        self._complete(req_seq, now)

    def notify_delivered(self, now, ev):
        seq = self.proposer.on_delivered(ev.inst, ev.value, now)
        if seq is not None:
            if not self.app_mode:
                self._complete(seq, now)
            self._drain(now)

    def _complete(self, req_seq, now):
        t0 = self.sent_at.pop(req_seq, None)
        if t0 is None:
            return
        self.latencies.append(now - t0)
        chain = self.chain_of_seq.pop(req_seq, None)
        if chain is not None and self.chains.get(chain, 0) > 0:
            self._chain_submit(chain, now)
        else:
            self._drain(now)

    # -- workload -----------------------------------------------------------

    def submit_scheduled(self, now, tag):
        if not self.alive:
            return
        self._submit(self.sim.workload_body(self, None, tag, now), now)

    def submit_batch(self, now, tag0, count):
        if not self.alive:
            return
        body_of = self.sim.workload_body
        for tag in range(tag0, tag0 + count):
            self._submit(body_of(self, None, tag, now), now)

    def _submit(self, body, now, chain=None):
        value = apps.encode_app_request(self.id, body) if self.app_mode else body
        seq = self.proposer.submit(value, now)
        self.submitted.append(body)
        self.sent_at[seq] = now
        if chain is not None:
            self.chain_of_seq[seq] = chain
        self._drain(now)
        return seq

    def _chain_submit(self, chain, now):
        self.chains[chain] -= 1
        body = self.sim.workload_body(self, chain, len(self.submitted), now)
        self._submit(body, now, chain=chain)

    def start_chains(self, now, per_chain):
        for chain, count in enumerate(per_chain):
            if count > 0:
                self.chains[chain] = count
                self._chain_submit(chain, now)

    # -- plumbing -----------------------------------------------------------

    def _drain(self, now):
        p = self.proposer
        out = p.outbox
        if out:
            p.outbox = []
            if p.recovery.outbox:
                out.extend(p.recovery.take_outbox())
            self.sim._emit(self, out, None, now)
        elif p.recovery.outbox:
            self.sim._emit(self, p.recovery.take_outbox(), None, now)
        if p._timers or p.recovery._timers:
            self.sim._arm(self)

    def next_wakeup(self):
        return self.proposer.next_wakeup()

    def on_wakeup(self, now):
        self.proposer.on_wakeup(now)
        self._drain(now)

    def final_state(self):
        return self.proposer.metrics()


class Simulation:
    def __init__(self, topology: Topology, faults=(), seed: int = 0,
                 workload: Optional[Workload] = None, capacity: int = 1024,
                 retransmit_timeout: Optional[float] = 0.05, max_retries: int = 10,
                 record_events: bool = True, gap_recovery_delay: Optional[float] = None,
                 noop_value: bytes = NOOP_VALUE, coordinator_start_inst: int = 0):
        topology.validate()
        self.topology = topology
        self.rng = random.Random(seed)
        self.capacity = capacity
        self.retransmit_timeout = retransmit_timeout
        self.max_retries = max_retries
        self.record_events = record_events
        self.gap_recovery_delay = gap_recovery_delay
        self.noop_value = noop_value
        self.workload = workload or Workload(mode="none")
        self.now = 0.0
        self._queue = []
        self._seq = 0
        self.events = []
        self.sent = self.dropped = self.duplicated = 0
        self.delivered_msgs = self.discarded_dead = 0

        next_swid = 1
        for spec in topology.roles:
            if spec.swid is None:
                spec.swid = next_swid
            next_swid = max(next_swid, spec.swid + 1)

        recoverers = [r for r in topology.roles if r.kind in ("proposer", "learner")]
        stride = max(1, len(recoverers))
        rec_index = {r.id: i for i, r in enumerate(recoverers)}

        self.nodes = {}
        self._acceptor_nodes = []
        self._learner_nodes = []
        self._proposer_nodes = []
        self._coordinator_node = None
        for spec in topology.roles:
            if spec.kind == "coordinator":
                node = _CoordinatorNode(self, spec, start_inst=coordinator_start_inst)
                self._coordinator_node = node
            elif spec.kind == "acceptor":
                node = _AcceptorNode(self, spec)
                self._acceptor_nodes.append(node)
            elif spec.kind == "learner":
                node = _LearnerNode(self, spec, rec_index[spec.id], stride)
                self._learner_nodes.append(node)
            else:
                node = _ProposerNode(self, spec, rec_index[spec.id], stride)
                self._proposer_nodes.append(node)
            self.nodes[spec.id] = node

        for spec in topology.roles:
            if spec.kind == "proposer" and spec.attach is not None:
                self.nodes[spec.attach].attached.append(self.nodes[spec.id])
        self._kv_workload = any(r.app == "kv" for r in topology.roles)

        for fault in faults:
            self.inject(fault)
        self._schedule_workload()

    @property
    def current_coordinator(self):
        return self._coordinator_node.id if self._coordinator_node else None

    # -- scheduling ---------------------------------------------------------

    def _at(self, t, fn, *args):
        self._seq += 1
        heappush(self._queue, (t, self._seq, _EV_CALL, fn, args))

    def inject(self, fault: FaultEvent):
        fault.validate()
        if fault.time < self.now:
            raise PastTimeError(f"fault at {fault.time} is before now={self.now}")
        self._at(fault.time, self._apply_fault, fault)

    def _schedule_workload(self):
        wl = self.workload
        if wl.mode == "none":
            return
        if not self._proposer_nodes:
            raise BadTopologyError("workload requires at least one proposer")
        if wl.mode == "open":
            for pnode in self._proposer_nodes:
                tag = 0
                for burst in wl.bursts:
                    if burst.interval == 0:
                        # one event per burst; identical semantics to count
                        # same-time events popped back to back
                        self._at(burst.start, pnode.submit_batch,
                                 tag, burst.count)
                        tag += burst.count
                    else:
                        for i in range(burst.count):
                            self._at(burst.start + i * burst.interval,
                                     pnode.submit_scheduled, tag)
                            tag += 1
        elif wl.mode == "closed":
            if len(self._proposer_nodes) != 1:
                raise BadTopologyError("closed-loop workload drives exactly one proposer")
            per_chain = [wl.count // wl.clients + (1 if i < wl.count % wl.clients else 0)
                         for i in range(wl.clients)]
            self._at(wl.start, self._proposer_nodes[0].start_chains, per_chain)
        else:
            raise ValueError(f"unknown workload mode {wl.mode!r}")

    def workload_body(self, pnode, chain, n, now):
        """Request body number ``n``: timestamped echo bytes, or a 50/50
        put-get mix when the topology hosts KV replicas."""
        wl = self.workload
        if self._kv_workload:
            key = b"key%d" % (n % 16)
            if n % 2 == 0:
                pad = max(0, wl.value_size - len(key) - 10)
                return apps.kv_encode(apps.KvOp(apps.OP_PUT, key,
                                                b"v%d" % n + b"\x00" * pad))
            return apps.kv_encode(apps.KvOp(apps.OP_GET, key))
        return _PAYLOAD_PACK(now, n & 0xFFFFFFFF).ljust(wl.value_size, b"\x00")

    def _arm(self, node):
        t = node.next_wakeup()
        if t is not None and t != node.armed_at:
            node.armed_at = t
            self._at(t, self._wakeup, node)

    def _wakeup(self, now, node):
        node.armed_at = None
        if node.alive:
            node.on_wakeup(now)
        self._arm(node)

    # -- transit ------------------------------------------------------------

    def _emit(self, src, outputs, requester, now):
        # Identity-dispatch on the pipeline's destination-set constants; the
        # generic loop below handles anything else.
        transmit = self._transmit
        for msg, dests in outputs:
            if dests is TO_ACCEPTORS:
                for node in self._acceptor_nodes:
                    transmit(src, node, msg, now)
            elif dests is TO_LEARNERS_AND_REQUESTER:
                for node in self._learner_nodes:
                    transmit(src, node, msg, now)
                if requester is not None and requester.kind != "learner":
                    transmit(src, requester, msg, now)
            elif dests is TO_REQUESTER_AND_LEARNERS:
                if requester is not None and requester.kind != "learner":
                    transmit(src, requester, msg, now)
                for node in self._learner_nodes:
                    transmit(src, node, msg, now)
            elif dests is TO_COORDINATOR:
                node = self._coordinator_node
                if node is not None:
                    transmit(src, node, msg, now)
            else:
                self._emit_generic(src, msg, dests, requester, now)

    def _emit_generic(self, src, msg, dests, requester, now):
        transmit = self._transmit
        for d in dests:
            if d is Dest.ACCEPTORS:
                for node in self._acceptor_nodes:
                    transmit(src, node, msg, now)
            elif d is Dest.LEARNERS:
                for node in self._learner_nodes:
                    transmit(src, node, msg, now)
            elif d is Dest.REQUESTER:
                # skip the extra copy when the requester already gets one
                # through its group (hardware multicast sends just one)
                if requester is not None and not (
                        (requester.kind == "learner" and Dest.LEARNERS in dests)
                        or (requester.kind == "acceptor" and Dest.ACCEPTORS in dests)):
                    transmit(src, requester, msg, now)
            elif d is Dest.COORDINATOR:
                node = self._coordinator_node
                if node is not None:
                    transmit(src, node, msg, now)

    def _transmit(self, src, dst, msg, now):
        lp = src.links_to.get(dst.id)
        if lp is None:
            lp = self.topology.links.get((src.id, dst.id))
            if lp is None:
                lp = self.topology.default_link
            src.links_to[dst.id] = lp
        self.sent += 1
        if lp[2] and self.rng.random() < lp[2]:
            self.dropped += 1
            if self.record_events:
                self.events.append({"t": now, "ev": "drop", "src": src.id,
                                    "dst": dst.id, "msg": _msg_dict(msg)})
            return
        copies = 1
        if lp[3] and self.rng.random() < lp[3]:
            copies = 2
            self.duplicated += 1
        jitter = lp[1]
        for _ in range(copies):
            delay = lp[0] + self.rng.random() * jitter if jitter else lp[0]
            self._seq += 1
            heappush(self._queue,
                     (now + delay, self._seq, _EV_DELIVER, dst, msg, src))
        if self.record_events:
            self.events.append({"t": now, "ev": "send", "src": src.id, "dst": dst.id,
                                "copies": copies, "msg": _msg_dict(msg)})

    def _send_app(self, src, reply_to, data):
        dst = self.nodes.get(reply_to)
        if dst is None:
            return
        now = self.now
        lp = src.links_to.get(dst.id)
        if lp is None:
            lp = self.topology.links.get((src.id, dst.id))
            if lp is None:
                lp = self.topology.default_link
            src.links_to[dst.id] = lp
        self.sent += 1
        rng = self.rng
        if lp[2] and rng.random() < lp[2]:
            self.dropped += 1
            if self.record_events:
                self.events.append({"t": now, "ev": "drop", "src": src.id,
                                    "dst": dst.id, "app": True})
            return
        copies = 1
        if lp[3] and rng.random() < lp[3]:
            copies = 2
            self.duplicated += 1
        jitter = lp[1]
        for _ in range(copies):
            delay = lp[0] + rng.random() * jitter if jitter else lp[0]
            self._at(now + delay, self._deliver_app, dst, data, src)
        if self.record_events:
            self.events.append({"t": now, "ev": "app_send", "src": src.id,
                                "dst": dst.id, "bytes": len(data)})

    def _deliver_app(self, now, dst, data, src):
        if not dst.alive:
            self.discarded_dead += 1
            return
        self.delivered_msgs += 1
        dst.receive_app(now, data, src)

    # -- faults -------------------------------------------------------------

    def _apply_fault(self, now, fault: FaultEvent):
        if self.record_events:
            self.events.append({"t": now, "ev": "fault", "action": fault.action,
                                "target": fault.target, "inst": fault.inst,
                                "start_inst": fault.start_inst})
        action = fault.action
        if action == "start_backup_coordinator":
            swid = max(r.swid for r in self.topology.roles) + 1 + len(self.nodes)
            spec = RoleSpec("coordinator", fault.target, swid=swid)
            node = _CoordinatorNode(self, spec, start_inst=fault.start_inst)
            self.nodes[fault.target] = node
            self._coordinator_node = node
            return
        node = self.nodes.get(fault.target)
        if node is None:
            raise ValueError(f"fault targets unknown role {fault.target}")
        if action == "kill_role":
            node.alive = False
        elif action == "revive_role":
            node.alive = True
            if hasattr(node, "reinitialize"):
                node.reinitialize()
        elif action == "trim":
            if node.kind != "acceptor":
                raise ValueError("trim targets an acceptor")
            node.core.trim(fault.inst)

    # -- driving ------------------------------------------------------------

    def run(self, until: Optional[float] = None) -> SimTrace:
        """Process events until the queue drains (quiescence) or virtual time
        passes ``until``. Returns the trace so far; callable repeatedly."""
        queue = self._queue
        pop = heappop
        record = self.record_events
        events = self.events
        while queue:
            if until is not None and queue[0][0] > until:
                break
            ev = pop(queue)
            t = ev[0]
            self.now = t
            if ev[2] == _EV_DELIVER:
                node = ev[3]
                if node.alive:
                    self.delivered_msgs += 1
                    if record:
                        events.append({"t": t, "ev": "recv", "src": ev[5].id,
                                       "dst": node.id, "msg": _msg_dict(ev[4])})
                    node.receive(t, ev[4], ev[5])
                else:
                    self.discarded_dead += 1
                    if record:
                        events.append({"t": t, "ev": "discard_dead", "dst": node.id,
                                       "msg": _msg_dict(ev[4])})
            else:
                ev[3](t, *ev[4])
        return self.trace()

    def trace(self) -> SimTrace:
        counters = {}
        deliveries = {}
        latencies = {}
        failed = {}
        final_states = {}
        mismatches = 0
        for rid, node in self.nodes.items():
            merged = dict(node.counters)
            core = getattr(node, "core", None)
            if core is not None:
                m = core.metrics()
                for k, v in m.get("emitted", {}).items():
                    merged[f"emit_{k}"] = v
                for k, v in m.get("dropped", {}).items():
                    merged[f"drop_{k}"] = v
            counters[rid] = merged
            final_states[rid] = node.final_state()
            if node.kind == "learner":
                merged["recv_phase_2b"] = node.n_recv_2b
                merged["recv_phase_1b"] = node.n_recv_1b
                merged["deliver"] = node.n_deliver
                tally = node.learner.tally
                deliveries[rid] = dict(tally.delivered)
                mismatches += len(tally.mismatches)
            elif node.kind == "proposer":
                latencies[rid] = list(node.latencies)
                failed[rid] = len(node.proposer.failed)
        counters["_transit"] = {
            "sent": self.sent, "dropped": self.dropped,
            "duplicated": self.duplicated, "delivered": self.delivered_msgs,
            "discarded_dead": self.discarded_dead,
        }
        return SimTrace(events=self.events, counters=counters,
                        deliveries=deliveries, mismatches=mismatches,
                        latencies=latencies, failed=failed,
                        final_states=final_states, end_time=self.now)

    def recover_missing(self) -> int:
        """Start recovery at every learner for instances it is missing below
        the global delivery frontier; returns how many were started. Run the
        simulation again afterwards to let them conclude."""
        frontier = -1
        for node in self._learner_nodes:
            if node.learner.tally.max_delivered > frontier:
                frontier = node.learner.tally.max_delivered
        started = 0
        for node in self._learner_nodes:
            if not node.alive:
                continue
            tally = node.learner.tally
            recovery = node.learner.recovery
            for inst in range(frontier + 1):
                if inst not in tally.delivered and not recovery.active(inst):
                    node.learner.recover(inst, self.noop_value, self.now)
                    started += 1
            if recovery.outbox:
                self._emit(node, recovery.take_outbox(), None, self.now)
            self._arm(node)
        return started


def build(topology: Topology, faults=(), seed: int = 0, **kwargs) -> Simulation:
    return Simulation(topology, faults=faults, seed=seed, **kwargs)


# -- JSON configuration ------------------------------------------------------

def _link_from_dict(d: dict) -> LinkParams:
    return LinkParams(
        base_latency=d.get("base_latency", DEFAULT_LINK_LATENCY),
        jitter=d.get("jitter", 0.0),
        drop_prob=d.get("drop_prob", 0.0),
        dup_prob=d.get("dup_prob", 0.0))


def config_to_simulation(cfg: dict) -> Simulation:
    """Build a Simulation from a parsed sim config document."""
    roles = [RoleSpec(kind=r["kind"], id=r["id"], attach=r.get("attach"),
                      app=r.get("app"), responder=r.get("responder", False),
                      swid=r.get("swid"))
             for r in cfg["roles"]]
    links = {(l["src"], l["dst"]): _link_from_dict(l) for l in cfg.get("links", [])}
    topo = Topology(f=cfg["f"], roles=roles, links=links,
                    default_link=_link_from_dict(cfg.get("default_link", {})))
    faults = [FaultEvent(time=fd["time"], action=fd["action"], target=fd["target"],
                         inst=fd.get("inst"), start_inst=fd.get("start_inst"))
              for fd in cfg.get("faults", [])]
    wl_cfg = cfg.get("workload")
    workload = None
    if wl_cfg:
        workload = Workload(
            mode=wl_cfg.get("mode", "open"),
            bursts=[Burst(b.get("start", 0.0), b["count"], b.get("interval", 0.001))
                    for b in wl_cfg.get("bursts", [])],
            clients=wl_cfg.get("clients", 1),
            count=wl_cfg.get("count", 0),
            value_size=wl_cfg.get("value_size", 16),
            start=wl_cfg.get("start", 0.0))
    return Simulation(
        topo, faults=faults, seed=cfg.get("seed", 0), workload=workload,
        capacity=cfg.get("capacity", 1024),
        retransmit_timeout=cfg.get("retransmit_timeout", 0.05),
        max_retries=cfg.get("max_retries", 10),
        record_events=cfg.get("record_events", True),
        gap_recovery_delay=cfg.get("gap_recovery_delay"),
        coordinator_start_inst=cfg.get("coordinator_start_inst", 0))


def load_config(path) -> Simulation:
    with open(path) as fh:
        cfg = json.load(fh)
    if cfg.get("kind") not in (None, "sim"):
        raise ValueError(f"config kind {cfg.get('kind')!r} is not a sim config")
    return config_to_simulation(cfg)


# -- seeded batch runs --------------------------------------------------------

def agreement_violations(deliveries: dict) -> int:
    """Instances for which two learners hold different value bytes."""
    values: dict[int, bytes] = {}
    bad = set()
    for per_learner in deliveries.values():
        for inst, (_, value) in per_learner.items():
            seen = values.get(inst)
            if seen is None:
                values[inst] = value
            elif seen != value:
                bad.add(inst)
    return len(bad)


def run_to_convergence(sim: Simulation, rounds: int = 5) -> SimTrace:
    """Run to quiescence, then keep starting gap recovery until every learner
    holds every instance below the global frontier (or ``rounds`` exhausts)."""
    trace = sim.run()
    for _ in range(rounds):
        if sim.recover_missing() == 0:
            break
        trace = sim.run()
    return trace


def _summarize_run(sim: Simulation, trace: SimTrace, seed) -> dict:
    out = {
        "seed": seed,
        "end_time": trace.end_time,
        "mismatches": trace.mismatches,
        "violations": agreement_violations(trace.deliveries),
        "delivered": {lid: len(d) for lid, d in trace.deliveries.items()},
        "failed": trace.failed,
        "transit": trace.counters["_transit"],
    }
    digests = {}
    applied = {}
    for node in sim._learner_nodes:
        app = node.app
        if isinstance(app, apps.KvReplica):
            digests[node.id] = app.digest()
            applied[node.id] = app.store.applied_count
    if digests:
        out["digests"] = digests
        out["applied"] = applied
    return out


def _batch_worker(args) -> dict:
    cfg, seed = args
    sim = config_to_simulation({**cfg, "seed": seed, "record_events": False})
    catchup = cfg.get("catchup_rounds", 0)
    trace = run_to_convergence(sim, catchup) if catchup else sim.run()
    return _summarize_run(sim, trace, seed)


def run_seeded_batch(cfg: dict, seeds, processes: Optional[int] = None) -> list[dict]:
    """Run one sim config under many seeds and summarize each run.

    Each run is deterministic in its seed, so distributing them over worker
    processes changes nothing but the wall time.
    """
    jobs = [(cfg, seed) for seed in seeds]
    if processes is None or processes <= 1 or len(jobs) < 2:
        return [_batch_worker(job) for job in jobs]
    import multiprocessing

    with multiprocessing.Pool(processes) as pool:
        return pool.map(_batch_worker, jobs, chunksize=max(1, len(jobs) // (processes * 8)))
