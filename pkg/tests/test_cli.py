import json
import subprocess
import sys

import pytest

from cdasim.cli import main


def sim(out, *extra):
    return main(["-q", "simulate", "--config", "zi_desk", "--seed", "7", "--steps", "300",
                 "--out", str(out), *extra])


def test_simulate_twice_identical(tmp_path):
    assert sim(tmp_path / "a") == 0
    assert sim(tmp_path / "b") == 0
    assert (tmp_path / "a" / "trades.csv").read_bytes() == (tmp_path / "b" / "trades.csv").read_bytes()


def test_refuses_to_overwrite_without_force(tmp_path):
    assert sim(tmp_path / "a") == 0
    assert sim(tmp_path / "a") == 1
    assert sim(tmp_path / "a", "--force") == 0


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["simulate", "--config", "zi_desk", "--out", str(tmp_path), "--bogus"]) == 1
    assert main(["simulate", "--config", "no_such_preset", "--out", str(tmp_path / "x")]) == 1
    assert main(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_analyze_empty_run_is_runtime_error(tmp_path, capsys):
    assert sim(tmp_path / "empty", "--steps", "0") == 0
    assert main(["analyze", "--run", str(tmp_path / "empty")]) == 2
    assert "DegenerateSeries" in capsys.readouterr().err


def test_analyze_writes_report(tmp_path):
    out = tmp_path / "run"
    assert main(["-q", "simulate", "--config", "zi_desk", "--steps", "2500", "--out", str(out)]) == 0
    assert main(["-q", "analyze", "--run", str(out)]) == 0
    report = json.loads((out / "analysis" / "report.json").read_text())
    assert report["pnl_identity"] is True
    assert set(report["kurtosis"]) == {"1", "10", "30"}
    assert main(["-q", "analyze", "--run", str(out)]) == 1


def test_pretrain_then_test_group_records_hash_chain(tmp_path):
    common = ["--config", "rl_desk", "--steps", "80"]
    assert main(["-q", "pretrain", *common, "--out", str(tmp_path / "pre")]) == 0
    ck = tmp_path / "pre" / "checkpoints"
    assert main(["-q", "simulate", *common, "--group", "test", "--checkpoints", str(ck),
                 "--out", str(tmp_path / "B")]) == 0
    pre = json.loads((tmp_path / "pre" / "run_manifest.json").read_text())
    b = json.loads((tmp_path / "B" / "run_manifest.json").read_text())
    assert b["config"]["group"] == "testing"
    assert b["checkpoints_in"] == pre["checkpoints_out"]
    assert b["content_hash"] != pre["content_hash"]
    assert main(["-q", "probe", "--run", str(tmp_path / "B"), "--checkpoints", f"pre={ck}",
                 "--threshold", "0.0", "--out", str(tmp_path / "probe")]) == 0
    summary = json.loads((tmp_path / "probe" / "probe.json").read_text())
    assert summary["pre"]["imbalanced"]["n"] > 0
    assert main(["-q", "replay", "--run", str(tmp_path / "B")]) == 0


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cdasim", "simulate", "--config", "zi_desk",
                        "--steps", "20", "--out", str(tmp_path / "r")],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "event=simulate.done" in r.stderr
    assert r.stdout == ""


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert "cdasim" in capsys.readouterr().out
