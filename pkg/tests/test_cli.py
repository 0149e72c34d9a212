import json
import subprocess
import sys

import pytest
import yaml

from poisonlab.cli import main

TREE = {
    "seed": 2, "n_seeds": 2, "env": {"kind": "LineWorld"}, "dataset": {"size": 600, "quality": "medium"},
    "victims": [{"algo_tag": "LinFQI", "train": {"n_iterations": 20}}],
    "attack_grid": [{"configs": [[0.05, 0.5]], "surface": "both"}], "n_eval_episodes": 40,
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "bench.yaml"
    p.write_text(yaml.safe_dump(TREE))
    return p


def test_run_twice_byte_identical(tmp_path, cfg_path, capsys):
    assert main(["run", "--config", str(cfg_path), "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg_path), "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    for name in ("report.json", "report.csv", "report.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pipeline_composition_reproduces_run_cell(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg_path), "--seed", "7", "--out", str(out), "--format", "json"]) == 0
    report = json.loads((out / "report.json").read_text())
    cell = [r for r in report["rows"] if r["seed"] == 8][0]
    step = tmp_path / "s"
    common = ["--config", str(cfg_path), "--out", str(step)]
    assert main(["generate", "--seed", "8"] + common) == 0
    assert main(["train", "--data", str(step / "dataset.jsonl")] + common) == 0
    assert main(["evaluate", "--model", str(step / "model.jsonl"), "--seed", "8"] + common) == 0
    assert json.loads((step / "evaluation.json").read_text())["mean"] == cell["clean_score"]


def test_attack_missing_c_total_names_field(tmp_path, cfg_path, capsys):
    out = ["--out", str(tmp_path)]
    assert main(["generate", "--config", str(cfg_path)] + out) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(tmp_path / "dataset.jsonl")] + out) == 0
    code = main(["attack", "--data", str(tmp_path / "dataset.jsonl"), "--model", str(tmp_path / "model.jsonl"),
                 "--strategy", "GlobalAllocation"] + out)
    assert code == 1 and "c_total" in capsys.readouterr().err


def test_score_attack_detect_chain(tmp_path, cfg_path):
    out = ["--out", str(tmp_path)]
    data, model = str(tmp_path / "dataset.jsonl"), str(tmp_path / "model.jsonl")
    assert main(["generate", "--config", str(cfg_path)] + out) == 0
    assert main(["train", "--config", str(cfg_path), "--data", data] + out) == 0
    assert main(["score", "--data", data, "--model", model, "--surface", "both"] + out) == 0
    assert (tmp_path / "sensitivity.csv").read_text().startswith("idx,delta,abs_delta,grad_norm,influence_proxy")
    assert main(["attack", "--data", data, "--model", model, "--strategy", "GlobalAllocation", "--c-total", "5",
                 "--surface", "both"] + out) == 0
    assert main(["detect", "--data", str(tmp_path / "poisoned.jsonl")] + out) == 0
    assert len((tmp_path / "detection.csv").read_text().splitlines()) == 4


def test_report_reemit(tmp_path, cfg_path):
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["report", "--input", str(tmp_path / "a" / "report.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.md").read_bytes() == (tmp_path / "b" / "report.md").read_bytes()


@pytest.mark.parametrize("argv", [["bogus"], ["run", "--nope"], [], ["attack"]])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_validation_and_runtime_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**TREE, "n_seeds": 0}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--victim", "LinFQI"]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "poisonlab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "poisonlab" in proc.stdout


def test_out_defaults_to_env(tmp_path, cfg_path, monkeypatch):
    monkeypatch.setenv("POISONLAB_OUT", str(tmp_path / "envout"))
    assert main(["generate", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "envout" / "dataset.jsonl").exists()
