import json
import subprocess
import sys

import pytest

from synthbalance import pipeline
from synthbalance.cli import main
from synthbalance.errors import TrainingError

from test_pipeline import tiny_config


def write_config(tmp_path, cfg, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_run_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path, tiny_config(tmp_path / "unused", "baseline_plain", explain={"enabled": False}))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    assert "AUC" in capsys.readouterr().out
    code = main(["report", "--experiments", str(tmp_path / "a"), str(tmp_path / "b"), "--reference", "--out", str(tmp_path / "t")])
    assert code == 0
    out = capsys.readouterr().out
    assert "MelaNet (reference)" in out and "baseline_plain" in out
    assert (tmp_path / "t" / "comparison.csv").read_text().startswith("method,auc_pct,sensitivity_pct,fn")
    assert (tmp_path / "t" / "roc_overlay.csv").exists()


def test_stage_command(tmp_path, capsys):
    cfg = write_config(tmp_path, tiny_config(tmp_path / "exp", "baseline_plain"))
    assert main(["stage", "prepare", "--config", cfg]) == 0
    assert json.loads(capsys.readouterr().out)["train_counts"] == {"benign": 11, "malignant": 4}


def test_bench_generate(tmp_path):
    cfg = write_config(tmp_path, {"image_side": 16, "n_majority": 8, "n_minority": 4})
    assert main(["bench", "generate", "--config", cfg, "--out", str(tmp_path / "bench")]) == 0
    assert (tmp_path / "bench" / "train" / "manifest.csv").exists()
    assert main(["bench", "generate", "--config", write_config(tmp_path, {"n_majority": 1, "n_minority": 4}, "bad.json")]) == 1


def test_exit_code_config_error(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--config", write_config(tmp_path, {"dataset": {}})]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 1
    assert "error" in capsys.readouterr().err


def test_exit_code_data_error(tmp_path):
    cfg = tiny_config(tmp_path / "out", "baseline_plain")
    cfg["dataset"] = {"train_manifest": "nope.csv", "test_manifest": "nope.csv"}
    assert main(["run", "--config", write_config(tmp_path, cfg)]) == 2


def test_exit_code_training_error(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingError("non-finite focal loss at epoch 1, step 1")

    monkeypatch.setattr(pipeline, "train_classifier", boom)
    assert main(["run", "--config", write_config(tmp_path, tiny_config(tmp_path / "out", "baseline_plain"))]) == 3


def test_exit_code_evaluation_error(tmp_path):
    # a test split without malignant samples has no defined sensitivity
    cfg = tiny_config(tmp_path / "out", "baseline_plain")
    cfg["dataset"]["synthetic"].update(n_minority=1, train_fraction=0.8)
    assert main(["run", "--config", write_config(tmp_path, cfg)]) == 4


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "synthbalance", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pipeline" in out.stdout
