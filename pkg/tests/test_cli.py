import json
import subprocess
import sys

import pytest

from mmvlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RESOURCE, main, version_string
from mmvlab.io import read_document


def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def _load(tmp_path, name):
    return json.loads((tmp_path / name).read_text())


def test_solve_writes_report(tmp_path):
    assert _run(tmp_path, "solve", "--scenario", "portfolio_const", "--paths", "1000", "--steps", "50") == EXIT_OK
    rep = _load(tmp_path, "solve.json")
    assert rep["pass"] and rep["command"] == "solve" and rep["n_paths"] == 1000
    info = _load(tmp_path, "run_info.json")
    assert info["exit_code"] == 0 and info["error"] is None and info["duration_seconds"] >= 0


def test_missing_theta(tmp_path):
    doc = read_document("portfolio_const")
    del doc["theta"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert _run(tmp_path, "solve", "--scenario", str(path)) == EXIT_CONFIG
    info = _load(tmp_path, "run_info.json")
    assert info["error"]["pointer"] == "/theta"


def test_too_few_steps(tmp_path):
    assert _run(tmp_path, "solve", "--scenario", "portfolio_const", "--steps", "1") == EXIT_CONFIG


def test_resource_limit(tmp_path, monkeypatch):
    monkeypatch.setenv("MMVLAB_MEMORY_MB", "1")
    assert _run(tmp_path, "verify-saddle", "--scenario", "portfolio_const", "--paths", "1000000") == EXIT_RESOURCE


def test_reruns_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["verify-saddle", "--scenario", "portfolio_const", "--paths", "20000", "--steps", "20",
                     "--out", str(out)]) == EXIT_OK
    assert (a / "verify_saddle.json").read_bytes() == (b / "verify_saddle.json").read_bytes()


@pytest.mark.parametrize("command, scenario", [("duality", "portfolio_const"),
                                               ("reinsurance", "reinsurance_discrete")])
def test_commands(tmp_path, command, scenario):
    assert _run(tmp_path, command, "--scenario", scenario, "--paths", "20000", "--steps", "50") == EXIT_OK
    assert _load(tmp_path, f"{command}.json")["pass"]


def test_dumps(tmp_path):
    assert _run(tmp_path, "solve", "--scenario", "portfolio_const", "--paths", "100", "--steps", "10",
                "--dump-paths", "--dump-bsde") == EXIT_OK
    assert (tmp_path / "bsde.csv").read_text().startswith("k,t,")
    assert (tmp_path / "paths.csv").read_text().startswith("path,k,t,X,Lambda")


def test_version_string():
    assert version_string().startswith("v0.1.0")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mmvlab.cli", "solve", "--scenario", "nonexistent_scenario",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert proc.stderr.startswith("error: ")
