import csv
import hashlib
import json

import numpy as np
import pytest

from hyperscat.cli import main
from hyperscat.data_io import N_BANDS, read_cube

TINY_FLAGS = ["--matching-epochs", "1", "--inverse-epochs", "1", "--misr-epochs", "30",
              "--matching-hidden", "8", "--misr-hidden", "8", "--inverse-widths", "4", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "data"), "--count", "3", "--size", "16",
                 "--seed", "5"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "models"), *TINY_FLAGS]) == 0
    return root


def test_gen_synthetic_files_and_manifest(workspace):
    data = workspace / "data"
    assert len(list(data.glob("*.hsc"))) == 9
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["count"] == 3 and [s["seed"] for s in manifest["scenes"]] == [5, 6, 7]
    entry = manifest["scenes"][1]
    digest = hashlib.sha256((data / entry["files"]["cube"]).read_bytes()).hexdigest()
    assert entry["sha256"]["cube"] == digest


def test_train_writes_checkpoints(workspace):
    names = sorted(p.name for p in (workspace / "models").iterdir())
    assert sum(n.endswith(".ckpt") for n in names) == 5
    config = json.loads((workspace / "models" / "pipeline.json").read_text())["config"]
    assert config["misr_epochs"] == 30 and config["inverse_widths"] == [4, 4]


def test_infer_and_evaluate(workspace, capsys):
    data, pred = workspace / "data", workspace / "pred"
    pred.mkdir()
    assert main(["infer", "--models", str(workspace / "models"), "--msi", str(data / "scene_0000_msi.hsc"),
                 "--mask", str(data / "scene_0000_mask.hsc"), "--out", str(pred / "scene_0000_pred.hsc")]) == 0
    assert main(["infer", "--models", str(workspace / "models"), "--msi", str(data / "scene_0001_msi.hsc"),
                 "--no-misr", "--out", str(pred / "scene_0001_pred.hsc")]) == 0
    assert read_cube(pred / "scene_0000_pred.hsc").values.shape == (16, 16, N_BANDS)
    capsys.readouterr()
    report = workspace / "report.csv"
    assert main(["evaluate", "--pred", str(pred), "--truth", str(data), "--masks", str(data),
                 "--out", str(report)]) == 0
    assert "±" in capsys.readouterr().out
    rows = list(csv.reader(report.open(encoding="utf-8")))
    assert [r[0] for r in rows[1:-1]] == ["scene_0000", "scene_0001"]
    assert 0 < float(rows[1][1]) < np.pi


def test_inspect_filters(tmp_path, capsys):
    assert main(["inspect-filters", "--J", "2", "--L", "4", "--size", "32", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.hsc"))) == 9
    assert "littlewood-paley" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--data", "x"],
    ["train", "--data", "x", "--out", "y", "--misr-epochs", "45"],
    ["gen-synthetic", "--out", "x", "--size", "30"],
    ["inspect-filters", "--J", "3", "--size", "36", "--out", "x"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


def test_data_errors_exit_2(tmp_path, workspace, capsys):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m")]) == 2
    (tmp_path / "bad_msi.hsc").write_bytes(b"JUNKJUNK")
    assert main(["infer", "--models", str(workspace / "models"), "--msi", str(tmp_path / "bad_msi.hsc"),
                 "--out", str(tmp_path / "o.hsc")]) == 2
    assert main(["infer", "--models", str(tmp_path), "--msi", str(tmp_path / "bad_msi.hsc"),
                 "--out", str(tmp_path / "o.hsc")]) == 2
    assert "error:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_3(tmp_path, workspace):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lr": float("inf")}))
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m"),
                 "--config", str(cfg), *TINY_FLAGS]) == 3


def test_unknown_config_key_is_usage_error(tmp_path, workspace):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m"),
                 "--config", str(cfg)]) == 1
