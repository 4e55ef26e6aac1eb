"""Paxos consensus with packet-rewriting coordinator/acceptor pipelines,
a deterministic simulated-network harness, a real-UDP runtime, a replicated
key-value store, and a benchmark suite."""

from caans.client import (
    Learner,
    LearnerTally,
    NOOP_VALUE,
    Proposer,
    RecoveryOutcome,
    learner_gaps,
    recover,
    register_deliver,
    submit,
)
from caans.dataplane import Acceptor, Coordinator, Dest
from caans.wire import MsgType, PaxosMessage, decode, encode

__all__ = [
    "Acceptor",
    "Coordinator",
    "Dest",
    "Learner",
    "LearnerTally",
    "MsgType",
    "NOOP_VALUE",
    "PaxosMessage",
    "Proposer",
    "RecoveryOutcome",
    "decode",
    "encode",
    "learner_gaps",
    "recover",
    "register_deliver",
    "submit",
]
__version__ = "0.1.0"
