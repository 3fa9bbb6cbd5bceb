import json
import shutil
import subprocess
import sys

import pytest
import yaml

from disciplinebench import cli
from disciplinebench import harness as h

from conftest import tiny_plan


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_plan(tmp_path / "unused").to_dict()))
    return str(path)


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["no-such-command"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 2
    capsys.readouterr()


def test_config_errors_exit_3_with_one_line(capsys, tmp_path, config):
    code, _, err = _run(capsys, "ladder", "--config", str(tmp_path / "missing.yaml"))
    assert code == 3
    assert err.count("\n") == 1 and err.startswith("error=ConfigError message=")
    code, _, err = _run(capsys, "ladder", "--config", config, "--stage", "bogus")
    assert code == 3
    code, _, err = _run(capsys, "ladder", "--config", config, "--seed", "1", "--seeds", "1..2")
    assert code == 3
    code, _, err = _run(capsys, "train", "--config", config, "--stage", "calibration")
    assert code == 3


def test_runtime_errors_exit_1(capsys, tmp_path, config):
    bogus = tmp_path / "model.bin"
    bogus.write_bytes(b"not a model")
    code, _, err = _run(capsys, "eval", "--config", config, "--checkpoint", str(bogus), "--out", str(tmp_path / "e"))
    assert code == 1
    assert err.startswith("error=ValueError message=")


def test_train_stage_then_eval_checkpoint(capsys, tmp_path, config):
    out = tmp_path / "train"
    code, stdout, _ = _run(capsys, "train", "--config", config, "--stage", "bc_only", "--seed", "3", "--out", str(out))
    assert code == 0
    summary = json.loads(stdout)
    assert summary["status"] == "complete" and summary["checkpoints"] == 1
    ckpt = out / "checkpoints" / "bc_only" / "seed3.bin"
    code, stdout, _ = _run(capsys, "eval", "--config", config, "--checkpoint", str(ckpt), "--regime", "CA",
                           "--seed", "3", "--out", str(tmp_path / "eval"))
    assert code == 0
    row = json.loads(stdout.splitlines()[0])
    assert row["seed"] == 3 and 0 <= row["l1"] <= 2
    # wrong regime width is a config error, caught before any simulation
    code, _, err = _run(capsys, "eval", "--config", config, "--checkpoint", str(ckpt), "--regime", "oracle",
                        "--out", str(tmp_path / "eval2"))
    assert code == 3


def test_simulate_then_diagnose_from_traces(capsys, tmp_path, config):
    sim = tmp_path / "sim"
    assert _run(capsys, "simulate", "--config", config, "--seeds", "1..2", "--episodes", "150", "--out", str(sim))[0] == 0
    assert sorted(p.name for p in (sim / "traces").iterdir()) == ["seed1.jsonl.gz", "seed2.jsonl.gz"]
    diag = tmp_path / "diag"
    code, stdout, _ = _run(capsys, "diagnose-aliasing", "--config", config, "--seeds", "1..2",
                           "--traces", str(sim / "traces"), "--out", str(diag))
    assert code == 0 and json.loads(stdout)["reports"] == ["aliasing", "summary"]
    code, stdout, _ = _run(capsys, "diagnose-oracle", "--config", config, "--seeds", "1",
                           "--out", str(tmp_path / "oracle"))
    assert code == 0
    _, rows = h.read_table(tmp_path / "oracle" / "reports" / "oracle_probe.csv")
    assert [r["features"] for r in rows] == ["observable", "oracle"]
    code, stdout, _ = _run(capsys, "fit-prior", "--config", config, "--seeds", "1", "--traces", str(sim / "traces"),
                           "--out", str(tmp_path / "prior"))
    assert code == 0 and (tmp_path / "prior" / "checkpoints" / "prior" / "seed1.bin").exists()


def test_report_regenerates_tables(capsys, tmp_path, config):
    out = tmp_path / "bid"
    assert _run(capsys, "bidding", "--config", config, "--seeds", "1..2", "--out", str(out))[0] == 0
    before = (out / "reports" / "bidding.csv").read_bytes()
    shutil.rmtree(out / "reports")
    assert _run(capsys, "report", str(out))[0] == 0
    assert (out / "reports" / "bidding.csv").read_bytes() == before
    assert _run(capsys, "report", str(tmp_path / "nowhere"))[0] == 3


def test_deploy_matrix_trains_its_dependencies(capsys, tmp_path, config):
    out = tmp_path / "deploy"
    code, stdout, _ = _run(capsys, "deploy-matrix", "--config", config, "--seeds", "1..2", "--out", str(out))
    assert code == 0
    _, rows = h.read_table(out / "reports" / "deployment.csv")
    assert {r["matchup"] for r in rows} == {"NC vs NC", "CA vs CA", "NC vs CA", "CA vs NC"}


def test_console_script_is_installed(tmp_path):
    exe = shutil.which("disciplinebench")
    cmd = [exe] if exe else [sys.executable, "-m", "disciplinebench.cli"]
    proc = subprocess.run(cmd + ["ladder", "--config", str(tmp_path / "absent.yaml")], capture_output=True, text=True)
    assert proc.returncode == 3
    assert proc.stderr.strip().startswith("error=ConfigError")
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "diagnose-aliasing" in proc.stdout
