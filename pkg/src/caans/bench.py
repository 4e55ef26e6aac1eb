"""Closed-loop workload generator and measurement harness.

N logical clients each submit a value carrying the current timestamp, wait
for the echo/KV response from the designated responder, and immediately
submit again. Latency is the client-side round trip; throughput is deliver
invocations at the designated learner over elapsed time (virtual time for
simulated deployments, wall time for live ones). Results are aggregated
per run into fixed-schema CSV rows.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import struct
import threading
import time
from dataclasses import dataclass
from typing import NamedTuple

from caans import runtime, simnet
from caans.apps import KvOp, OP_GET, OP_PUT, kv_encode

CSV_COLUMNS = ("N", "run", "throughput", "mean_us", "std_us", "p50", "p95", "p99")

_TS = struct.Struct("!dI")


class EmptySamplesError(ValueError):
    pass


class IncompleteRunError(RuntimeError):
    pass


@dataclass
class WorkloadParams:
    clients: int = 1                 # 1..22 is the interesting sweep range
    messages: int = 1000             # total messages per run, across clients
    value_size: int = 64
    mode: str = "echo"               # echo | kv (50/50 get-put mix)
    runs: int = 3


class BenchSummary(NamedTuple):
    mean: float
    std: float
    p50: float
    p95: float
    p99: float


class RunStats(NamedTuple):
    n_clients: int
    run: int
    throughput: float
    mean_us: float
    std_us: float
    p50_us: float
    p95_us: float
    p99_us: float

    def csv_row(self):
        return (self.n_clients, self.run, f"{self.throughput:.1f}",
                f"{self.mean_us:.1f}", f"{self.std_us:.1f}",
                f"{self.p50_us:.1f}", f"{self.p95_us:.1f}", f"{self.p99_us:.1f}")


def percentile(sorted_samples, p: float):
    """Nearest-rank percentile of a pre-sorted sequence."""
    if not sorted_samples:
        raise EmptySamplesError("no samples")
    rank = math.ceil(p / 100.0 * len(sorted_samples))
    return sorted_samples[max(rank, 1) - 1]


def summarize(samples) -> BenchSummary:
    """Mean, population std, and nearest-rank p50/p95/p99."""
    data = sorted(samples)
    if not data:
        raise EmptySamplesError("no samples")
    return BenchSummary(
        mean=statistics.fmean(data),
        std=statistics.pstdev(data),
        p50=percentile(data, 50),
        p95=percentile(data, 95),
        p99=percentile(data, 99),
    )


def _stats_from(samples_s, n_clients, run, delivered, elapsed) -> RunStats:
    micros = [s * 1e6 for s in samples_s]
    summary = summarize(micros)
    throughput = delivered / elapsed if elapsed > 0 else 0.0
    return RunStats(n_clients, run, throughput, summary.mean, summary.std,
                    summary.p50, summary.p95, summary.p99)


def write_csv(path, rows: list[RunStats]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_row())


def load_deployment(source):
    """Accepts a path or parsed dict; returns ("sim"|"runtime", config)."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source) as fh:
            cfg = json.load(fh)
    else:
        cfg = source
    kind = cfg.get("kind")
    if kind == "deployment":
        return "runtime", runtime.config_from_dict(cfg)
    if kind in (None, "sim"):
        return "sim", cfg
    raise ValueError(f"unknown deployment kind {kind!r}")


def run_workload(params: WorkloadParams, deployment, seed: int = 0) -> list[RunStats]:
    """Run the closed-loop workload ``params.runs`` times; one stats row per run."""
    kind, cfg = load_deployment(deployment)
    rows = []
    for run_idx in range(params.runs):
        if kind == "sim":
            rows.append(_run_sim(params, cfg, seed + run_idx, run_idx))
        else:
            rows.append(_run_live(params, cfg, run_idx))
    return rows


# -- simulated deployment -----------------------------------------------------

def _sim_config_for(params: WorkloadParams, cfg: dict) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy; keep caller's dict intact
    app = "kv" if params.mode == "kv" else "echo"
    learners = [r for r in cfg["roles"] if r["kind"] == "learner"]
    if not any(r.get("app") for r in learners):
        for r in learners:
            r["app"] = app
        learners[0]["responder"] = True
    proposers = [r for r in cfg["roles"] if r["kind"] == "proposer"]
    for r in proposers:
        r.pop("attach", None)  # responses, not co-located delivery, close the loop
    cfg["workload"] = {"mode": "closed", "clients": params.clients,
                       "count": params.messages, "value_size": params.value_size}
    cfg.setdefault("record_events", False)
    return cfg


def _run_sim(params: WorkloadParams, cfg: dict, seed: int, run_idx: int) -> RunStats:
    sim = simnet.config_to_simulation({**_sim_config_for(params, cfg), "seed": seed})
    trace = sim.run()
    if any(trace.failed.values()):
        raise IncompleteRunError(f"{sum(trace.failed.values())} requests failed permanently")
    samples = [s for per in trace.latencies.values() for s in per]
    responder = next(r.id for r in sim.topology.roles
                     if r.kind == "learner" and r.responder)
    delivered = trace.counters[responder]["deliver"]
    return _stats_from(samples, params.clients, run_idx, delivered, trace.end_time)


# -- live deployment ----------------------------------------------------------

def _body(params: WorkloadParams, i: int) -> bytes:
    head = _TS.pack(time.monotonic(), i & 0xFFFFFFFF)
    if params.mode == "kv":
        key = b"key%d" % (i % 16)
        if i % 2 == 0:
            pad = max(0, params.value_size - len(key) - 10)
            return kv_encode(KvOp(OP_PUT, key, head + b"\x00" * pad))
        return kv_encode(KvOp(OP_GET, key))
    return head.ljust(params.value_size, b"\x00")


def _responder_learner(config) -> str:
    for entry in config.learners:
        if entry.responder:
            return entry.addr
    return config.learners[0].addr


def _run_live(params: WorkloadParams, config, run_idx: int) -> RunStats:
    responder = _responder_learner(config)
    before = runtime.query_stats(responder)  # raises DeploymentUnreachableError
    proposer = runtime.UdpProposer(config).start()
    per_client = [params.messages // params.clients +
                  (1 if i < params.messages % params.clients else 0)
                  for i in range(params.clients)]
    samples: list[float] = []
    lock = threading.Lock()
    failures: list[int] = []

    def client_loop(chain: int, count: int):
        for i in range(count):
            t0 = time.monotonic()
            response = proposer.submit_and_wait(_body(params, chain * 1_000_000 + i),
                                                timeout=30.0)
            if response is None:
                with lock:
                    failures.append(chain)
                return
            rtt = time.monotonic() - t0
            with lock:
                samples.append(rtt)

    threads = [threading.Thread(target=client_loop, args=(c, n), daemon=True)
               for c, n in enumerate(per_client) if n > 0]
    t0 = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.monotonic() - t0
    proposer.close()
    if failures:
        raise IncompleteRunError(f"clients {sorted(set(failures))} failed permanently")
    after = runtime.query_stats(responder)
    delivered = after.get("deliver", 0) - before.get("deliver", 0)
    return _stats_from(samples, params.clients, run_idx, delivered, elapsed)


def sweep(clients_range, params: WorkloadParams, deployment, seed: int = 0) -> list[RunStats]:
    """One row per (N, run) over the given client counts."""
    rows = []
    for n in clients_range:
        p = WorkloadParams(clients=n, messages=params.messages,
                           value_size=params.value_size, mode=params.mode,
                           runs=params.runs)
        rows.extend(run_workload(p, deployment, seed=seed))
    return rows
