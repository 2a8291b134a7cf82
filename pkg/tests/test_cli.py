import json
import subprocess
import sys

import pytest

from visprompt.cli import main
from visprompt.datagen import load_datasets

FAST = {"method": "coop", "epochs": 1, "seeds": [1], "n_classes": 4, "n_test": 8}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(FAST))
    return path


def test_run_writes_to_env_directory(tmp_path, config, monkeypatch, capsys):
    out = tmp_path / "res"
    monkeypatch.setenv("VISPROMPT_OUT", str(out))
    assert main(["run", "--config", str(config)]) == 0
    files = sorted(p.suffix for p in out.iterdir())
    assert files == [".csv", ".json"]
    assert "coop B2N" in capsys.readouterr().out


def test_sweep_and_report(tmp_path, config, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--axis", "cls_position", "--config", str(config),
                 "--values", '["front", "end"]', "--out", str(out)]) == 0
    rows = json.loads((out / "sweep_cls_position.json").read_text())
    assert [r["value"] for r in rows] == ["front", "end"]
    capsys.readouterr()
    assert main(["report", "--in", str(out)]) == 0
    table = capsys.readouterr().out
    assert "sweep_cls_position[front]" in table and "sweep_cls_position[end]" in table


def test_gen_data_round_trip(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--protocol", "SSMT", "--seed", "3",
                 "--n-classes", "4", "--delta", "0.5"]) == 0
    manifest, data = load_datasets(out)
    assert manifest["seed"] == 3
    assert set(data) == {"train", "test_source", "test_target1", "test_target2", "test_target3"}


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"method": "coop", "learning_rate": 0.1}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["report", "--in", str(tmp_path / "nothing")]) == 2


def test_sweep_rejects_values_off_the_axis(tmp_path, config):
    assert main(["sweep", "--axis", "shots", "--config", str(config), "--values", "[3]",
                 "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "visprompt", "report", "--in", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "no result files" in proc.stderr
