"""CLI surface: bench runs, trace checking, exit codes."""

import csv

import pytest

from lockbench.cli import main
from lockbench.trace import TraceEvent, write_trace

BENCH_FAST = [
    "bench",
    "--design", "client-centric",
    "--clients", "3",
    "--items", "2",
    "--ops", "25",
]


def test_bench_single_run_prints_summary(capsys):
    assert main(BENCH_FAST) == 0
    out = capsys.readouterr().out
    assert "client-centric on inproc" in out
    assert "75 locks" in out


def test_bench_writes_csv_and_trace(tmp_path, capsys):
    csv_path = tmp_path / "run.csv"
    trace_path = tmp_path / "run.trace"
    argv = BENCH_FAST + ["--csv", str(csv_path), "--trace", str(trace_path)]
    assert main(argv) == 0
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["total_locks"] == "75"
    assert trace_path.read_text().count("\n") == 4 * 75
    # The written trace passes its own checker.
    assert main(["check", str(trace_path), "--design", "client-centric"]) == 0


def test_bench_sweep_prints_one_row_per_point(tmp_path, capsys):
    csv_path = tmp_path / "sweep.csv"
    argv = BENCH_FAST + ["--sweep-clients", "1,2", "--csv", str(csv_path)]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert out.count("client-centric") == 2
    with open(csv_path, newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_bench_sweep_flags_are_mutually_exclusive(capsys):
    argv = BENCH_FAST + ["--sweep-clients", "1", "--sweep-items", "1"]
    with pytest.raises(SystemExit):
        main(argv)


def test_check_accepts_clean_trace(tmp_path, capsys):
    path = tmp_path / "clean.trace"
    write_trace(path, [
        TraceEvent(1, 1, 0, "ACQ", "EXCLUSIVE", "REQ"),
        TraceEvent(2, 1, 0, "ACQ", "EXCLUSIVE", "GRANT"),
        TraceEvent(3, 1, 0, "REL", "EXCLUSIVE", "REQ"),
        TraceEvent(4, 1, 0, "REL", "EXCLUSIVE", "ACK"),
    ])
    assert main(["check", str(path)]) == 0
    assert "no violations" in capsys.readouterr().out


def test_check_flags_unsafe_trace(tmp_path, capsys):
    path = tmp_path / "bad.trace"
    write_trace(path, [
        TraceEvent(1, 1, 0, "ACQ", "EXCLUSIVE", "REQ"),
        TraceEvent(2, 1, 0, "ACQ", "EXCLUSIVE", "GRANT"),
        TraceEvent(3, 2, 0, "ACQ", "EXCLUSIVE", "REQ"),
        TraceEvent(4, 2, 0, "ACQ", "EXCLUSIVE", "GRANT"),
    ])
    assert main(["check", str(path)]) == 1
    assert "DOUBLE_EXCLUSIVE" in capsys.readouterr().out


def test_check_missing_file_exits_2(capsys):
    assert main(["check", "/nonexistent/trace"]) == 2


def test_check_malformed_trace_exits_2(tmp_path, capsys):
    path = tmp_path / "garbage.trace"
    path.write_text("this is not a trace\n")
    assert main(["check", str(path)]) == 2
    assert "malformed" in capsys.readouterr().err


def test_unknown_design_is_an_argparse_error():
    with pytest.raises(SystemExit):
        main(["bench", "--design", "wishful"])
