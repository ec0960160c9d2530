import argparse
import json
import os
import subprocess
import sys

import pytest

from xflow import analyzer, cli
from xflow.data_folder import LedgerFile, LedgerRow, ledger_paths, load_ledgers, write_ledger


@pytest.fixture
def clean_env(monkeypatch, agent_so):
    for k in list(os.environ):
        if k.startswith("XFLOW_") and k not in ("XFLOW_CACHE_DIR", "XFLOW_AGENT"):
            monkeypatch.delenv(k)
    monkeypatch.delenv("LD_PRELOAD", raising=False)
    monkeypatch.delenv("LD_BIND_NOW", raising=False)
    return monkeypatch


def xrun(out, *argv, opts=()):
    return cli.main(["run", "--out", str(out), *opts, "--", *map(str, argv)])


def last_ledgers(out):
    pid = json.loads((out / "xflow.run").read_text())["pid"]
    return pid, load_ledgers(ledger_paths(out, pid))[0]


def test_run_hello_writes_ledgers_and_metadata(fx, clean_env, tmp_path, capfd):
    assert xrun(tmp_path, fx.main_lazy, "hello") == 0
    out = capfd.readouterr()
    assert out.out == "hello\n"
    pid, ledgers = last_ledgers(tmp_path)
    assert len(ledgers) == 1
    assert f"pid {pid}" in out.err
    meta = json.loads((tmp_path / "xflow.run").read_text())
    assert meta["command"] == [str(fx.main_lazy), "hello"]


def fx_noop_row(ledgers):
    (row,) = [r for led in ledgers for r in led.rows if r.symbol == "fx_noop"]
    return row


def test_timing_rate_flag(fx, clean_env, tmp_path):
    assert xrun(tmp_path, fx.main_lazy, "loop", "1000", opts=["--timing-rate", "16"]) == 0
    row = fx_noop_row(last_ledgers(tmp_path)[1])
    assert row.count == 1000
    assert abs(row.timed_count - 1000 / 16) <= 1


def test_flag_overrides_environment(fx, clean_env, tmp_path):
    clean_env.setenv("XFLOW_TIMING_RATE", "1000")
    assert xrun(tmp_path, fx.main_lazy, "loop", "1000", opts=["--timing-rate", "16"]) == 0
    assert abs(fx_noop_row(last_ledgers(tmp_path)[1]).timed_count - 62.5) <= 1
    args = argparse.Namespace(out=str(tmp_path), timing_rate=8, dump_signal=None, deny="libfoo", shadow_depth=None)
    env = cli.build_env(args, "/x/libxflow.so", {"XFLOW_TIMING_RATE": "2", "XFLOW_SHADOW_DEPTH": "9",
                                                   "LD_PRELOAD": "/y/other.so"})
    assert env["XFLOW_TIMING_RATE"] == "8"
    assert env["XFLOW_SHADOW_DEPTH"] == "9"
    assert env["XFLOW_DENY_IMAGES"] == "libfoo"
    assert env["LD_PRELOAD"] == "/x/libxflow.so /y/other.so"


def test_environment_used_without_flag(fx, clean_env, tmp_path):
    clean_env.setenv("XFLOW_TIMING_RATE", "4")
    assert xrun(tmp_path, fx.main_lazy, "loop", "400") == 0
    assert abs(fx_noop_row(last_ledgers(tmp_path)[1]).timed_count - 100) <= 1


def test_nonexistent_command(clean_env, tmp_path, capsys):
    assert xrun(tmp_path, "/nonexistent/prog") == 1
    assert "cannot launch" in capsys.readouterr().err
    assert ledger_paths(tmp_path) == []


def test_missing_command(clean_env, tmp_path, capsys):
    assert cli.main(["run", "--out", str(tmp_path)]) == 1
    assert "missing command" in capsys.readouterr().err


def test_exit_status_propagates(fx, clean_env, tmp_path):
    assert xrun(tmp_path, fx.main_lazy, "no-such-scenario") == 2
    assert xrun(tmp_path, "/bin/sh", "-c", "kill -TERM $$") == 128 + 15
    assert xrun(tmp_path, "/bin/sh", "-c", "exit 7") == 7


def test_report_without_ledgers(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path)]) == 1
    assert "no ledgers found" in capsys.readouterr().err


def test_report_default_views_and_json(fx, clean_env, tmp_path, capsys):
    assert xrun(tmp_path, fx.main_lazy, "relation", "5", "7") == 0
    capsys.readouterr()
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "Component view: fx_main" in text and "API view:" in text

    assert cli.main(["report", "--out", str(tmp_path), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["schema"] == analyzer.REPORT_SCHEMA
    comp = doc["views"][0]
    assert comp["kind"] == "component" and comp["subject"] == "fx_main"
    assert sum(r["cycles"] for r in comp["rows"]) == comp["total_cycles"]
    assert abs(sum(r["percent"] for r in comp["rows"]) - 100) <= 0.1


def test_report_shows_both_caller_relations(fx, clean_env, tmp_path, capsys):
    assert xrun(tmp_path, fx.main_lazy, "relation", "5", "7") == 0
    capsys.readouterr()
    for image in ("fx_main", "libfx_a.so"):
        assert cli.main(["report", "--out", str(tmp_path), "--view", "component", "--image", image,
                         "--format", "json"]) == 0
        names = [r["name"] for r in json.loads(capsys.readouterr().out)["views"][0]["rows"]]
        assert "libfx_b.so" in names
    assert cli.main(["report", "--out", str(tmp_path), "--view", "api", "--image", "libfx_b.so",
                     "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)["views"][0]["rows"]
    assert {r["name"]: r["count"] for r in rows}["fx_b_target"] == 12


def test_report_unknown_image(fx, clean_env, tmp_path, capsys):
    assert xrun(tmp_path, fx.main_lazy, "hello") == 0
    assert cli.main(["report", "--out", str(tmp_path), "--view", "api", "--image", "nothere"]) == 1
    assert "known images" in capsys.readouterr().err


def test_report_imbalance_view(fx, clean_env, tmp_path, capsys):
    assert xrun(tmp_path, fx.main_lazy, "threads", "3", "10") == 0
    capsys.readouterr()
    assert cli.main(["report", "--out", str(tmp_path), "--view", "imbalance"]) == 0
    text = capsys.readouterr().out
    assert "ratio" in text and "balanced" in text


def test_report_warns_with_exit_2(tmp_path, capsys):
    led = LedgerFile(0, 0, 1000, 100, {0: "/bin/app"}, [LedgerRow(0, 0, "f", "plt-lazy", 1, 1, 5, 5, -1)])
    path = write_ledger(led, tmp_path, pid=42)
    path.write_text(path.read_text() + "1\t0\tbroken\n")
    assert cli.main(["report", "--out", str(tmp_path), "--view", "component"]) == 2
    assert "malformed row" in capsys.readouterr().out


def test_wait_apis_flag(tmp_path, capsys):
    led = LedgerFile(0, 0, 1000, 100, {0: "/bin/app"}, [LedgerRow(0, 0, "f", "plt-lazy", 1, 1, 40, 40, -1)])
    write_ledger(led, tmp_path, pid=42)
    assert cli.main(["report", "--out", str(tmp_path), "--view", "component", "--wait-apis", "f",
                     "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)["views"][0]["rows"]
    assert rows[1] == {"name": "Wait", "cycles": 40, "percent": 40.0, "seconds": 0.04}


def test_console_entry_point(agent_so):
    proc = subprocess.run([sys.executable, "-m", "xflow", "agent"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert proc.stdout.strip() == str(agent_so)
    proc = subprocess.run([sys.executable, "-m", "xflow", "--help"], capture_output=True, text=True)
    assert "report" in proc.stdout
