"""Real-deployment launcher: one UDP process per role, driven by a shared
deployment config.

Every role binds a single datagram socket. Datagrams that decode as
consensus packets feed the role's state machine; anything that does not is
treated as a control command (text: ``STATS``, ``PING``, and ``TRIM n`` on
acceptors) or an application response. The two can share a socket because
a valid packet's first two bytes are 0x0000..0x0004 while commands and app
responses start with ASCII, so there is no overlap.

The simulator and this runtime host the same role classes, so the protocol
logic has exactly one implementation; only the transport differs.
"""

from __future__ import annotations

import json
import signal
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from caans import apps, wire
from caans.client import NOOP_VALUE, Learner, Proposer, RecoveryManager, unwrap_envelope
from caans.dataplane import Acceptor, Coordinator, Dest, InstanceExhaustedError
from caans.wire import PaxosMessage

DEFAULT_RETRANSMIT_TIMEOUT = 0.2
RECOVERY_CLIENT_SLOTS = 8          # round-space slots reserved for client-side recoverers
_BUFSIZE = 4096
_SOCK_RCVBUF = 1 << 20


class ConfigParseError(ValueError):
    pass


class ValidationError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DeploymentUnreachableError(RuntimeError):
    pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


@dataclass
class RoleEntry:
    id: str
    swid: int
    addr: str
    app: Optional[str] = None
    responder: bool = False
    start_inst: int = 0

    @property
    def host_port(self) -> tuple[str, int]:
        return parse_addr(self.addr)


@dataclass
class DeploymentConfig:
    f: int
    coordinator: RoleEntry
    acceptors: list[RoleEntry]
    learners: list[RoleEntry]
    backup_coordinator: Optional[RoleEntry] = None
    capacity: int = 1024
    retransmit_timeout: float = DEFAULT_RETRANSMIT_TIMEOUT
    max_retries: int = 10
    gap_recovery_delay: Optional[float] = None
    extras: dict = field(default_factory=dict)

    @property
    def quorum(self) -> int:
        return self.f + 1

    def entries(self):
        out = [self.coordinator, *self.acceptors, *self.learners]
        if self.backup_coordinator is not None:
            out.append(self.backup_coordinator)
        return out

    def find(self, kind: str, role_id: str) -> RoleEntry:
        pool = {"coordinator": [self.coordinator] +
                ([self.backup_coordinator] if self.backup_coordinator else []),
                "acceptor": self.acceptors,
                "learner": self.learners}.get(kind)
        if pool is None:
            raise ValidationError("role", f"unknown role kind {kind!r}")
        for entry in pool:
            if entry.id == role_id:
                return entry
        raise ValidationError(kind, f"no {kind} with id {role_id!r}")

    def validate(self):
        if self.f < 0:
            raise ValidationError("f", "must be >= 0")
        n = len(self.acceptors)
        if n != 2 * self.f + 1:
            raise ValidationError("acceptors", f"{n} entries but f={self.f}; need n = 2f+1")
        if not self.learners:
            raise ValidationError("learners", "at least one learner required")
        seen_ids, seen_swids, seen_addrs = set(), set(), set()
        for entry in self.entries():
            if entry.id in seen_ids:
                raise ValidationError(f"roles.{entry.id}", "duplicate id")
            if entry.swid in seen_swids:
                raise ValidationError(f"roles.{entry.id}.swid",
                                      f"duplicate swid {entry.swid}")
            if entry.addr in seen_addrs:
                raise ValidationError(f"roles.{entry.id}.addr",
                                      f"duplicate address {entry.addr}")
            parse_addr(entry.addr)
            seen_ids.add(entry.id)
            seen_swids.add(entry.swid)
            seen_addrs.add(entry.addr)


def _entry_from(obj: dict, path: str) -> RoleEntry:
    try:
        return RoleEntry(
            id=obj["id"], swid=int(obj["swid"]), addr=obj["addr"],
            app=obj.get("app"), responder=obj.get("responder", False),
            start_inst=int(obj.get("start_inst", 0)))
    except KeyError as exc:
        raise ValidationError(f"{path}.{exc.args[0]}", "missing field") from None


def config_from_dict(cfg: dict) -> DeploymentConfig:
    try:
        coordinator = _entry_from(cfg["coordinator"], "coordinator")
        acceptors = [_entry_from(a, f"acceptors[{i}]")
                     for i, a in enumerate(cfg.get("acceptors", []))]
        learners = [_entry_from(l, f"learners[{i}]")
                    for i, l in enumerate(cfg.get("learners", []))]
        backup = cfg.get("backup_coordinator")
        config = DeploymentConfig(
            f=int(cfg["f"]),
            coordinator=coordinator,
            acceptors=acceptors,
            learners=learners,
            backup_coordinator=_entry_from(backup, "backup_coordinator")
            if backup else None,
            capacity=int(cfg.get("capacity", 1024)),
            retransmit_timeout=float(cfg.get("retransmit_timeout",
                                             DEFAULT_RETRANSMIT_TIMEOUT)),
            max_retries=int(cfg.get("max_retries", 10)),
            gap_recovery_delay=cfg.get("gap_recovery_delay"),
            extras=cfg.get("extras", {}))
    except KeyError as exc:
        raise ValidationError(str(exc.args[0]), "missing field") from None
    config.validate()
    return config


def load_config(path) -> DeploymentConfig:
    """Load and validate a deployment config file."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    if cfg.get("kind") not in (None, "deployment"):
        raise ConfigParseError(f"{path}: kind {cfg.get('kind')!r} is not a deployment")
    return config_from_dict(cfg)


def _open_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, _SOCK_RCVBUF)
    sock.bind((host, port))
    sock.settimeout(0.05)
    return sock


class RoleHost:
    """One role bound to one UDP socket; receive, process, fan out."""

    def __init__(self, config: DeploymentConfig, kind: str, role_id: str,
                 listen_override: Optional[str] = None):
        self.config = config
        self.kind = kind
        self.entry = config.find(kind, role_id)
        host, port = self.entry.host_port
        if listen_override:
            host, port = parse_addr(listen_override)
        try:
            self.sock = _open_socket(host, port)
        except OSError as exc:
            raise OSError(f"cannot bind {kind} {role_id} to {host}:{port}: {exc}") from exc
        self.acceptor_addrs = [a.host_port for a in config.acceptors]
        self.learner_addrs = [l.host_port for l in config.learners]
        self.coordinator_addr = config.coordinator.host_port
        self.counters: dict[str, int] = {}
        self.stopping = threading.Event()

        quorum = config.quorum
        if kind == "coordinator":
            self.core = Coordinator(start_inst=self.entry.start_inst,
                                    swid=self.entry.swid)
        elif kind == "acceptor":
            self.core = Acceptor(swid=self.entry.swid, capacity=config.capacity)
        elif kind == "learner":
            index = [l.id for l in config.learners].index(role_id)
            stride = len(config.learners) + RECOVERY_CLIENT_SLOTS
            recovery = RecoveryManager(quorum, self.entry.swid, index=index,
                                       stride=stride,
                                       timeout=config.retransmit_timeout,
                                       max_attempts=config.max_retries)
            self.core = Learner(quorum, swid=self.entry.swid, recovery=recovery)
            self.app = self._make_app(self.entry)
            if self.app is not None:
                self.core.register_deliver(self.app.on_deliver)
            self._last_gap_check = 0.0
        else:
            raise ValidationError("role", f"cannot host role kind {kind!r}")

    def _make_app(self, entry: RoleEntry):
        if entry.app == "echo":
            return apps.EchoResponder(send=self._send_app, responder=entry.responder)
        if entry.app == "kv":
            return apps.KvReplica(send=self._send_app, responder=entry.responder)
        if entry.app is None:
            return None
        raise ValidationError(f"learners.{entry.id}.app", f"unknown app {entry.app!r}")

    def _send_app(self, reply_to: str, data: bytes):
        try:
            addr = parse_addr(reply_to)
        except ValueError:
            self._bump("bad_reply_addr")
            return
        self.sock.sendto(data, addr)

    def _bump(self, key: str, n: int = 1):
        self.counters[key] = self.counters.get(key, 0) + n

    def _resolve(self, dests, src_addr):
        out = []
        for d in dests:
            if d is Dest.ACCEPTORS:
                out.extend(self.acceptor_addrs)
            elif d is Dest.LEARNERS:
                out.extend(self.learner_addrs)
            elif d is Dest.COORDINATOR:
                out.append(self.coordinator_addr)
            elif d is Dest.REQUESTER and src_addr is not None and src_addr not in out:
                out.append(src_addr)
        return out

    def _send_outputs(self, outputs, src_addr):
        sendto = self.sock.sendto
        for msg, dests in outputs:
            data = wire.encode(msg)
            for addr in self._resolve(dests, src_addr):
                try:
                    sendto(data, addr)
                except OSError:
                    self._bump("send_error")
                    return
                self._bump("sent")

    def _handle_control(self, data: bytes, src_addr):
        text = data.decode("ascii", "replace").strip()
        if text == "STATS":
            self.sock.sendto(self.stats_text().encode(), src_addr)
        elif text == "PING":
            self.sock.sendto(b"PONG", src_addr)
        elif text.startswith("TRIM ") and self.kind == "acceptor":
            arg = text[5:]
            if arg.isdigit():
                self.core.trim(int(arg))
                self.sock.sendto(b"OK", src_addr)
            else:
                self.sock.sendto(b"ERR bad instance", src_addr)
        else:
            self._bump("bad_datagram")

    def stats_text(self) -> str:
        lines = [f"role {self.kind}", f"id {self.entry.id}", f"swid {self.entry.swid}"]
        for key, value in sorted(self.counters.items()):
            lines.append(f"{key} {value}")
        if self.kind in ("coordinator", "acceptor"):
            m = self.core.metrics()
            for key, value in sorted(m.get("emitted", {}).items()):
                lines.append(f"emit_{key} {value}")
            for key, value in sorted(m.get("dropped", {}).items()):
                lines.append(f"drop_{key} {value}")
            if self.kind == "coordinator":
                lines.append(f"next_inst {m['next_inst']}")
            else:
                lines.append(f"trim_watermark {m['trim_watermark']}")
        elif self.kind == "learner":
            tally = self.core.tally
            lines.append(f"deliver {len(tally.delivered)}")
            lines.append(f"mismatches {len(tally.mismatches)}")
            lines.append(f"gaps {len(tally.gaps())}")
        return "\n".join(lines) + "\n"

    def _process(self, msg: PaxosMessage, src_addr, now: float):
        if self.kind == "learner":
            self.core.process(msg, now)
            outputs = self.core.take_outbox()
        else:
            try:
                outputs = self.core.process(msg)
            except InstanceExhaustedError:
                self._bump("instance_exhausted")
                return
        if outputs:
            self._send_outputs(outputs, src_addr)

    def _tick(self, now: float):
        if self.kind != "learner":
            return
        core = self.core
        wake = core.next_wakeup()
        if wake is not None and wake <= now:
            core.on_wakeup(now)
            out = core.take_outbox()
            if out:
                self._send_outputs(out, None)
        delay = self.config.gap_recovery_delay
        if delay is not None and now - self._last_gap_check >= delay:
            self._last_gap_check = now
            recovery = core.recovery
            started = False
            for inst in core.gaps():
                if not recovery.active(inst):
                    core.recover(inst, NOOP_VALUE, now)
                    self._bump("recover_started")
                    started = True
            if started:
                self._send_outputs(core.take_outbox(), None)

    def serve(self):
        """Receive-dispatch loop; returns once stop() is called."""
        recv = self.sock.recvfrom
        while not self.stopping.is_set():
            try:
                data, src_addr = recv(_BUFSIZE)
            except socket.timeout:
                self._tick(time.monotonic())
                continue
            except OSError:
                break
            try:
                msg = wire.decode(data)
            except wire.WireError:
                self._handle_control(data, src_addr)
                continue
            self._bump("recv")
            self._process(msg, src_addr, time.monotonic())
            self._tick(time.monotonic())

    def stop(self):
        self.stopping.set()

    def close(self):
        self.stop()
        self.sock.close()


def run_role(config: DeploymentConfig, kind: str, role_id: str,
             listen_override: Optional[str] = None, install_signals: bool = True,
             out=sys.stdout) -> RoleHost:
    """Run one role until SIGTERM/SIGINT; flushes counters on the way out."""
    host = RoleHost(config, kind, role_id, listen_override=listen_override)
    if install_signals:
        def handler(signum, frame):
            host.stop()
        signal.signal(signal.SIGTERM, handler)
        signal.signal(signal.SIGINT, handler)
    print(f"caans {kind} {role_id} listening on {host.sock.getsockname()}",
          file=out, flush=True)
    try:
        host.serve()
    finally:
        print(host.stats_text(), file=out, flush=True)
        host.close()
    return host


def query_stats(addr: str, timeout: float = 1.0, attempts: int = 5) -> dict:
    """Fetch a role's counters over the control channel. Raises
    DeploymentUnreachableError if it never answers."""
    target = parse_addr(addr)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(timeout)
    try:
        for _ in range(attempts):
            sock.sendto(b"STATS", target)
            try:
                data, _ = sock.recvfrom(65536)
            except socket.timeout:
                continue
            out = {}
            for line in data.decode().splitlines():
                key, _, value = line.partition(" ")
                out[key] = int(value) if value.lstrip("-").isdigit() else value
            return out
        raise DeploymentUnreachableError(f"no STATS reply from {addr}")
    finally:
        sock.close()


def send_trim(addr: str, inst: int, timeout: float = 1.0):
    target = parse_addr(addr)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(timeout)
    try:
        sock.sendto(b"TRIM %d" % inst, target)
        data, _ = sock.recvfrom(256)
        return data == b"OK"
    finally:
        sock.close()


class UdpProposer:
    """Client-side host for the proposer library over a real socket.

    Requests are wrapped as app requests carrying this socket's address, so
    the designated responder can answer directly. A request's first two
    sends go to the primary coordinator; later retries go to the backup
    (when configured), and once any request resolves via the backup it
    becomes the default for new traffic.
    """

    def __init__(self, config: DeploymentConfig, client_id: Optional[int] = None,
                 listen_host: str = "127.0.0.1", recovery_index: Optional[int] = None):
        self.config = config
        self.sock = _open_socket(listen_host, 0)
        host, port = self.sock.getsockname()
        self.reply_to = f"{host}:{port}"
        if client_id is None:
            client_id = (port << 32) | (int(time.time()) & 0xFFFFFFFF)
        stride = len(config.learners) + RECOVERY_CLIENT_SLOTS
        self.proposer = Proposer(
            client_id=client_id, swid=client_id, quorum=config.quorum,
            retransmit_timeout=config.retransmit_timeout,
            max_retries=config.max_retries,
            recovery_index=len(config.learners) + (recovery_index or 0),
            recovery_stride=stride)
        self.lock = threading.Lock()
        self.responses: dict[int, tuple[int, bytes]] = {}
        self._waiters: dict[int, threading.Event] = {}
        self.on_response = None        # hook(req_seq, status, body)
        self.prefer_backup = False
        self._thread: Optional[threading.Thread] = None
        self._closing = False

    # -- sending ------------------------------------------------------------

    def _coordinator_addr(self, retries: int):
        backup = self.config.backup_coordinator
        if backup is not None and (self.prefer_backup or retries >= 2):
            if retries >= 2:
                self.prefer_backup = True
            return backup.host_port
        return self.config.coordinator.host_port

    def _drain_locked(self, now: float):
        p = self.proposer
        for msg, dests in p.take_outbox():
            data = wire.encode(msg)
            for d in dests:
                if d is Dest.COORDINATOR:
                    retries = 0
                    parsed = unwrap_envelope(msg.value)
                    if parsed is not None:
                        entry = p.pending.get(parsed[1])
                        if entry is not None:
                            retries = entry.retries
                    self.sock.sendto(data, self._coordinator_addr(retries))
                elif d is Dest.ACCEPTORS:
                    for a in self.config.acceptors:
                        self.sock.sendto(data, a.host_port)

    def submit(self, body: bytes) -> int:
        """Queue one request body; returns its sequence number."""
        value = apps.encode_app_request(self.reply_to, body)
        with self.lock:
            now = time.monotonic()
            seq = self.proposer.submit(value, now)
            self._drain_locked(now)
        return seq

    def recover(self, inst: int, noop_value: bytes = NOOP_VALUE):
        with self.lock:
            now = time.monotonic()
            task = self.proposer.recover(inst, noop_value, now)
            self._drain_locked(now)
        return task

    # -- receiving ------------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self

    def _loop(self):
        while not self._closing:
            try:
                data, _ = self.sock.recvfrom(_BUFSIZE)
            except socket.timeout:
                data = None
            except OSError:
                break
            now = time.monotonic()
            with self.lock:
                if data is not None:
                    self._dispatch(data, now)
                self.proposer.on_wakeup(now)
                self._drain_locked(now)
                if self._waiters and self.proposer.failed:
                    for seq in list(self._waiters):
                        if seq in self.proposer.failed:
                            self._waiters.pop(seq).set()

    def _dispatch(self, data: bytes, now: float):
        # app responses dominate this socket; consensus packets (recovery
        # replies) are the exception
        if data.startswith(apps.RESPONSE_MAGIC):
            try:
                client_id, req_seq, status, body = apps.decode_app_response(data)
            except apps.KvMalformedError:
                return
            if client_id != self.proposer.client_id:
                return
            self.proposer.resolve(req_seq)
            if req_seq not in self.responses:
                self.responses[req_seq] = (status, body)
                waiter = self._waiters.pop(req_seq, None)
                if waiter is not None:
                    waiter.set()
                if self.on_response is not None:
                    self.on_response(req_seq, status, body)
            return
        try:
            msg = wire.decode(data)
        except wire.WireError:
            return
        self.proposer.on_message(msg, now)

    def wait(self, req_seq: int, timeout: float = 5.0):
        """Block until the response for ``req_seq`` arrives; None on timeout
        or permanent failure."""
        with self.lock:
            if req_seq in self.responses:
                return self.responses[req_seq]
            if req_seq in self.proposer.failed:
                return None
            event = self._waiters.setdefault(req_seq, threading.Event())
        event.wait(timeout)
        with self.lock:
            self._waiters.pop(req_seq, None)
            return self.responses.get(req_seq)

    def submit_and_wait(self, body: bytes, timeout: float = 5.0):
        return self.wait(self.submit(body), timeout)

    def close(self):
        self._closing = True
        if self._thread is not None:
            self._thread.join(timeout=1.0)
        self.sock.close()
