import csv
import json

import pytest

from caans.cli import main


def test_sim_command_runs_config_and_writes_trace(tmp_path, capsys):
    out = tmp_path / "trace.jsonl"
    rc = main(["sim", "--config", "configs/sim-chaos.json",
               "--seed", "3", "--out", str(out)])
    assert rc == 0
    summary = capsys.readouterr().out
    assert '"mismatches": 0' in summary
    lines = out.read_text().splitlines()
    assert len(lines) > 100
    first = json.loads(lines[0])
    assert "ev" in first and "t" in first
    assert "summary" in json.loads(lines[-1])


def test_sim_command_rejects_deployment_config(tmp_path):
    rc = main(["sim", "--config", "configs/deploy-local.json"])
    assert rc == 2


def test_bench_command_sim_deployment(tmp_path):
    out = tmp_path / "stats.csv"
    rc = main(["bench", "--clients", "2", "--messages", "40", "--runs", "2",
               "--value-size", "32", "--mode", "echo",
               "--deployment", "configs/sim-echo.json",
               "--seed", "1", "--out", str(out)])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {r["N"] for r in rows} == {"2"}
    assert all(float(r["p50"]) > 0 for r in rows)


def test_bench_sweep_rows_per_client_count(tmp_path):
    out = tmp_path / "sweep.csv"
    rc = main(["bench-sweep", "--clients", "1..3", "--messages", "30",
               "--runs", "1", "--value-size", "32",
               "--deployment", "configs/sim-echo.json", "--out", str(out)])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["N"] for r in rows] == ["1", "2", "3"]


def test_run_rejects_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    rc = main(["run", "--role", "coordinator", "--id", "c0",
               "--config", str(bad)])
    assert rc == 2


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for cmd in ("run", "sim", "kv", "bench", "bench-sweep"):
        assert cmd in text
