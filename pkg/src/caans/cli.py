"""Command-line entry points: role processes, simulator runs, the KV
client, and the benchmark harness."""

from __future__ import annotations

import argparse
import json
import os
import sys

from caans import bench, runtime, simnet
from caans.apps import (
    KvOp,
    OP_DEL,
    OP_GET,
    OP_PUT,
    STATUS_NOT_FOUND,
    STATUS_OK,
    kv_encode,
    parse_kv_response,
)


def _parse_clients(spec: str):
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return range(int(lo), int(hi) + 1)
    return [int(spec)]


def cmd_run(args) -> int:
    config = runtime.load_config(args.config)
    listen = args.listen or os.environ.get("CAANS_LISTEN")
    runtime.run_role(config, args.role, args.id, listen_override=listen)
    return 0


def cmd_sim(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    if cfg.get("kind") not in (None, "sim"):
        print(f"error: {args.config} is not a sim config", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is None:
        cfg.setdefault("record_events", False)
    sim = simnet.config_to_simulation(cfg)
    trace = sim.run(until=args.until)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(simnet.trace_to_jsonl(trace))
        print(f"wrote {len(trace.events)} events to {args.out}")
    print(json.dumps(trace.summary(), indent=2, sort_keys=True))
    return 0


def cmd_kv(args) -> int:
    config = runtime.load_config(args.config)
    if args.op == "put":
        op = KvOp(OP_PUT, args.key.encode(), args.value.encode())
    elif args.op == "get":
        op = KvOp(OP_GET, args.key.encode())
    else:
        op = KvOp(OP_DEL, args.key.encode())
    proposer = runtime.UdpProposer(config).start()
    try:
        response = proposer.submit_and_wait(kv_encode(op), timeout=args.timeout)
    finally:
        proposer.close()
    if response is None:
        print("error: request timed out", file=sys.stderr)
        return 1
    status, body = response
    kv_status, value = parse_kv_response(body)
    if kv_status == STATUS_OK:
        print(value.decode("utf-8", "replace") if args.op == "get" else "OK")
        return 0
    if kv_status == STATUS_NOT_FOUND:
        print("NOT_FOUND")
        return 1
    print("MALFORMED", file=sys.stderr)
    return 1


def _bench_params(args) -> bench.WorkloadParams:
    return bench.WorkloadParams(clients=getattr(args, "single_n", 1),
                                messages=args.messages,
                                value_size=args.value_size,
                                mode=args.mode, runs=args.runs)


def cmd_bench(args) -> int:
    params = bench.WorkloadParams(clients=args.clients, messages=args.messages,
                                  value_size=args.value_size, mode=args.mode,
                                  runs=args.runs)
    rows = bench.run_workload(params, args.deployment, seed=args.seed)
    _emit_rows(rows, args.out)
    return 0


def cmd_bench_sweep(args) -> int:
    params = bench.WorkloadParams(messages=args.messages,
                                  value_size=args.value_size, mode=args.mode,
                                  runs=args.runs)
    rows = bench.sweep(_parse_clients(args.clients), params, args.deployment,
                       seed=args.seed)
    _emit_rows(rows, args.out)
    return 0


def _emit_rows(rows, out):
    if out:
        bench.write_csv(out, rows)
        print(f"wrote {len(rows)} rows to {out}")
    else:
        print(",".join(bench.CSV_COLUMNS))
        for row in rows:
            print(",".join(str(v) for v in row.csv_row()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caans",
        description="Paxos with packet-rewriting coordinator/acceptor pipelines: "
                    "simulator, UDP runtime, KV store, and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one role process from a deployment config")
    p.add_argument("--role", required=True,
                   choices=["coordinator", "acceptor", "learner"])
    p.add_argument("--id", required=True, help="role id from the config")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", help="override listen address (host:port); "
                                    "also via CAANS_LISTEN")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sim", help="run a simulation config to quiescence")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the event trace as JSON lines")
    p.add_argument("--seed", type=int)
    p.add_argument("--until", type=float, help="stop at this virtual time")
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("kv", help="replicated key-value store client")
    p.add_argument("op", choices=["put", "get", "del"])
    p.add_argument("key")
    p.add_argument("value", nargs="?", default="")
    p.add_argument("--config", required=True, help="deployment config")
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(fn=cmd_kv)

    def bench_common(p):
        p.add_argument("--messages", type=int, default=1000,
                       help="total messages per run")
        p.add_argument("--value-size", type=int, default=64, dest="value_size")
        p.add_argument("--mode", choices=["echo", "kv"], default="echo")
        p.add_argument("--deployment", required=True,
                       help="sim or deployment config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--runs", type=int, default=3)
        p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("bench", help="closed-loop benchmark at one client count")
    p.add_argument("--clients", type=int, required=True)
    bench_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("bench-sweep", help="benchmark across a client-count range")
    p.add_argument("--clients", required=True, help="range like 1..22, or one count")
    bench_common(p)
    p.set_defaults(fn=cmd_bench_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (runtime.ConfigParseError, runtime.ValidationError,
            bench.IncompleteRunError, runtime.DeploymentUnreachableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
