import json
import subprocess
import sys

import pytest

from contingency_games.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main


@pytest.fixture(scope="module")
def configs(tmp_path_factory):
    out = tmp_path_factory.mktemp("configs")
    assert main(["emit-defaults", "--out", str(out)]) == EXIT_OK
    return out


def test_emit_defaults_writes_both_scenarios(configs):
    for name in ("jaywalking", "overtaking"):
        data = json.loads((configs / f"{name}.json").read_text())
        assert data["scenario"] == name and data["schema_version"] == 1


def test_solve_then_verify(configs, tmp_path):
    cfg = str(configs / "jaywalking.json")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    sol = json.loads((tmp_path / "solution.json").read_text())
    assert sol["converged"] and "config_hash" in sol
    report = json.loads((tmp_path / "kkt_report.json").read_text())
    assert report["passed"]
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "verify_report.json").read_text())["passed"]

    # a tampered solution fails verification
    sol["v"][5] += 0.1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(sol))
    assert main(["verify", "--config", cfg, "--out", str(tmp_path), "--solution", str(bad)]) == EXIT_VERIFY

    # and so does a solution checked against a different config
    code = main(["verify", "--config", cfg, "--out", str(tmp_path), "--set", "lse_sharpness=10"])
    assert code == EXIT_VERIFY


def test_config_errors_exit_2(configs, tmp_path, capsys):
    cfg = str(configs / "overtaking.json")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path), "--set", "bogus=1"]) == EXIT_CONFIG
    assert main(["solve", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sweep-open", "--config", cfg, "--out", str(tmp_path), "--tb-list", "3,x"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_sweep_command(configs, tmp_path):
    cfg = str(configs / "overtaking.json")
    args = ["sweep-open", "--config", cfg, "--out", str(tmp_path), "--tb-list", "0,25", "--grid-points", "1"]
    assert main(args) == EXIT_OK
    summary = json.loads((tmp_path / "open_loop_summary.json").read_text())
    assert {row["t_b"] for row in summary["table"]} == {0, 25}


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "contingency_games.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "sweep-closed" in out.stdout
