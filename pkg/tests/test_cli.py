import json
import subprocess
import sys
from pathlib import Path

import pytest

from toysim.harness.cli import main, parse_range, parse_sweep, UsageError

SCEN = Path(__file__).resolve().parent.parent / "scenarios"


def test_run_passing_scenario(tmp_path, capsys):
    out, rep = tmp_path / "t.jsonl", tmp_path / "r.jsonl"
    code = main(["run", "--scenario", str(SCEN / "fault_free_n4.cfg"), "--check", "--rounds", "30",
                 "--out", str(out), "--report", str(rep)])
    assert code == 0
    report = json.loads(rep.read_text())
    assert report["blocks_tentative"] == 30 and report["violations"] == []
    assert out.read_text().startswith('{"')


def test_sweep_over_n_emits_three_reports(tmp_path):
    rep = tmp_path / "r.jsonl"
    code = main(["run", "--scenario", str(SCEN / "fault_free_n4.cfg"), "--rounds", "20",
                 "--sweep", "n=4,7,10", "--report", str(rep), "--out", str(tmp_path / "t.jsonl")])
    assert code == 0
    lines = [json.loads(x) for x in rep.read_text().splitlines()]
    assert [r["n"] for r in lines] == [4, 7, 10] and [r["f"] for r in lines] == [1, 2, 3]
    assert sorted(p.name for p in tmp_path.glob("t-*.jsonl")) == ["t-n10.jsonl", "t-n4.jsonl", "t-n7.jsonl"]


def test_missing_file_is_usage_error(capsys):
    assert main(["run", "--scenario", "does/not/exist.cfg"]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--frobnicate"])
    assert exc.value.code == 2


def test_bad_scenario_content_is_usage_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n=3\nf=1\n")
    assert main(["run", "--scenario", str(bad)]) == 2


def test_beyond_f_warns(capsys):
    assert main(["run", "--scenario", str(SCEN / "beyond_f.cfg"), "--check"]) == 0
    assert "oracle disabled" in capsys.readouterr().err


def test_oracle_failure_exit_code(monkeypatch):
    from toysim.harness import cli
    from toysim.harness.oracle import Violation

    real = cli.run_scenario

    def broken(sc, check=True):
        res = real(sc, check=check)
        res.violations = [Violation("agreement", "seeded")]
        return res

    monkeypatch.setattr(cli, "run_scenario", broken)
    assert main(["run", "--rounds", "5", "--check"]) == 1


def test_ranges():
    assert parse_range("4,7,10") == [4, 7, 10]
    assert parse_range("1..5") == [1, 2, 3, 4, 5]
    assert parse_range("0..64..16") == [0, 16, 32, 48, 64]
    assert parse_range("0.5,1") == [0.5, 1]
    for bad in ("5..1", "1..2..0", "a,b", "1..2..3..4"):
        with pytest.raises(UsageError):
            parse_range(bad)
    assert parse_sweep(["n=4,7", "beta=1,2"]) == [{"n": 4, "beta": 1}, {"n": 4, "beta": 2},
                                                   {"n": 7, "beta": 1}, {"n": 7, "beta": 2}]
    with pytest.raises(UsageError):
        parse_sweep(["gst=1,2"])


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "toysim", "run", "--rounds", "5"], capture_output=True, text=True)
    assert proc.returncode == 0 and "blocks=5" in proc.stdout
