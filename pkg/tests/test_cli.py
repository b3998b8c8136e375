import json
import subprocess
import sys

import pytest

from thermosyphon_da.harness.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, run

SMALL = ["--set", "run.cycles=30", "--set", "run.spinup=10", "--set", "run.runs=2"]


def test_twin_writes_reports(tmp_path):
    out = tmp_path / "twin"
    assert run(["twin", "--out-dir", str(out), "--seed", "3"] + SMALL) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == "twin" and manifest["seed"] == 3
    assert set(manifest["files"]) == {"summary.csv", "windows_run0.csv", "windows_run1.csv"}
    assert manifest["config"]["run.cycles"] == "30"


def test_rerun_from_manifest_is_bitwise(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["twin", "--out-dir", str(a)] + SMALL + ["--set", "filter.kind=enkf", "--set", "filter.mu=0.1"]) == 0
    assert run(["twin", "--config", str(a / "manifest.json"), "--out-dir", str(b), "--jobs", "2"]) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["files"] == mb["files"] and ma["config"] == mb["config"]
    for name in ma["files"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_config_file_and_errors(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("run.cycles = 20\nrun.spinup = 5\n")
    assert run(["twin", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    assert run(["twin", "--config", str(tmp_path / "missing.cfg"), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    cfg.write_text("run.cycles = 5\nrun.spinup = 10\n")
    assert run(["twin", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert run(["twin", "--set", "bogus", "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert run(["twin", "--jobs", "0", "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert run(["skill-matrix", "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG  # needs the ring model


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["twin", "--out-dir", str(blocker / "sub")] + SMALL) == EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path):
    # a Courant number far above one makes the upwind ring scheme blow up
    # while building the climatology, before any filter could recover
    args = ["twin", "--out-dir", str(tmp_path / "o"), "--set", "model.kind=ring", "--set", "run.dt=4.0",
            "--set", "run.window=40.0", "--set", "filter.kind=letkf"] + SMALL
    assert run(args) == EXIT_NUMERICAL


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "thermosyphon_da.harness.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("twin", "sweep-window", "sweep-inflation", "skill-matrix", "dmd"):
        assert cmd in proc.stdout


def test_missing_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        run([])
    assert info.value.code == 2
