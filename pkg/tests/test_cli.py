import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import head_config
from kdl.cli import main
from kdl.data import gen_synthetic, save_csv, split

ROOT = Path(__file__).resolve().parents[1]


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def spiral_cfg(tmp_path):
    return write_json(tmp_path / "cfg.json", head_config("kdl", 2, hidden=32).to_json())


@pytest.fixture
def quick_params(tmp_path):
    return write_json(tmp_path / "params.json", {"max_epochs": 4, "augment": None, "batch_size": 32})


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_train_writes_run_artifacts(tmp_path, spiral_cfg, quick_params, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--config", spiral_cfg, "--data", "synthetic:spiral:40", "--out", str(out),
               "--params", quick_params, "--seed", "3"])
    assert rc == 0
    rows = (out / "history.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,train_acc,val_loss,val_acc,lr" and len(rows) >= 2
    result = json.loads((out / "result.json").read_text())
    assert result["seed"] == 3 and result["status"] == "completed"
    assert {"config.json", "weights.json", "weights.bin"} <= {p.name for p in out.iterdir()}
    assert not list(out.glob("*.tmp"))


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--data", "synthetic:spiral", "--out", str(tmp_path / "o")]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_data_shape_mismatch_exits_2(tmp_path, quick_params):
    # default config expects 1x48x48 images
    assert main(["train", "--data", "synthetic:spiral", "--out", str(tmp_path / "o"), "--params", quick_params]) == 2


def test_overflow_fixture_exits_3(tmp_path, quick_params, capsys):
    cfg = head_config("kdl", 3).to_json()
    cfg["head"]["init_scale"] = 1e6
    rc = main(["train", "--config", write_json(tmp_path / "c.json", cfg), "--data", "synthetic:spiral",
               "--out", str(tmp_path / "o"), "--params", quick_params])
    assert rc == 3
    err = capsys.readouterr().err
    assert "epoch 0, batch 0" in err and "layer" in err
    assert not (tmp_path / "o" / "result.json").exists()


def test_ablation_rows(tmp_path, spiral_cfg, quick_params, capsys):
    out = tmp_path / "abl"
    rc = main(["ablation", "--config", spiral_cfg, "--data", "synthetic:spiral:30", "--out", str(out),
               "--degrees", "1,2,3", "--with-fc", "--params", quick_params])
    assert rc == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["fc", "kdl_n1", "kdl_n2", "kdl_n3"]
    assert {"variant", "best_val_acc", "epochs_to_stop", "wall_time"} <= set(rows[0])
    assert all(r["status"] == "ok" for r in rows)
    # every variant trained on the same shuffled data
    cfgs = [json.loads((out / r["variant"] / "config.json").read_text()) for r in rows]
    assert len({c["seed"] for c in cfgs}) == 1


def test_ablation_failed_row_continues(tmp_path, quick_params, capsys):
    cfg = head_config("kdl", 3).to_json()
    cfg["head"]["init_scale"] = 1e6
    out = tmp_path / "abl"
    rc = main(["ablation", "--config", write_json(tmp_path / "c.json", cfg), "--data", "synthetic:spiral:30",
               "--out", str(out), "--degrees", "1,3", "--params", quick_params])
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert rc != 0 and [r["status"] for r in rows] == ["ok", "failed"]


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--inject-fault"]) == 1
    assert "kdl/poly3" in capsys.readouterr().err
    assert main(["gradcheck", "--eps", "1e-3"]) == 2
    assert main(["gradcheck", "--eps", "1e-8"]) == 2


def test_bench(capsys):
    assert main(["bench", "--iters", "0"]) == 2
    capsys.readouterr()
    args = ["bench", "--dim", "256", "--units", "64", "--batch", "32", "--iters", "30"]
    main(args + ["--layer", "kdl", "--degree", "1"])
    kdl1 = last_json(capsys)
    main(args + ["--layer", "kdl", "--degree", "1"])
    again = last_json(capsys)
    main(args + ["--layer", "dense"])
    dense = last_json(capsys)
    assert set(kdl1) == {"forward_ns_per_call", "backward_ns_per_call", "checksum"}
    assert kdl1["checksum"] == again["checksum"] == dense["checksum"]
    ratio = (kdl1["forward_ns_per_call"] + kdl1["backward_ns_per_call"]) / \
            (dense["forward_ns_per_call"] + dense["backward_ns_per_call"])
    assert 0.5 <= ratio <= 2.0


def test_eval_matches_library_and_counts(tmp_path, spiral_cfg, quick_params, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", spiral_cfg, "--data", "synthetic:spiral:40", "--out", str(out),
                 "--params", quick_params]) == 0
    capsys.readouterr()
    # evaluate in a second process
    proc = subprocess.run([sys.executable, "-m", "kdl", "eval", "--weights", str(out),
                           "--data", "synthetic:spiral:40", "--split", "val"],
                          capture_output=True, text=True, check=True)
    res = json.loads(proc.stdout)
    result = json.loads((out / "result.json").read_text())
    assert abs(res["accuracy"] - result["best_val_acc"]) <= 1e-6
    conf = np.array(res["confusion_matrix"])
    data = split(gen_synthetic("spiral", 40, 3, seed=0), (0.8, 0.1, 0.1), 0)
    assert conf.sum(axis=1).tolist() == np.bincount(data.val.labels, minlength=3).tolist()


def test_eval_errors(tmp_path, spiral_cfg, quick_params, capsys):
    out = tmp_path / "run"
    main(["train", "--config", spiral_cfg, "--data", "synthetic:spiral:40", "--out", str(out), "--params", quick_params])
    empty = tmp_path / "empty.csv"
    empty.write_text("emotion,pixels,Usage\n")
    assert main(["eval", "--weights", str(out), "--data", str(empty)]) == 2
    cfg = json.loads((out / "config.json").read_text())
    cfg["head"]["num_classes"] = 4
    (out / "config.json").write_text(json.dumps(cfg))
    assert main(["eval", "--weights", str(out), "--data", "synthetic:spiral:40"]) == 2
    assert "num_classes" in capsys.readouterr().err


def test_train_from_csv(tmp_path, capsys):
    ds = gen_synthetic("checkerboard-image", 6, 3, seed=0, image_hw=(32, 32))
    csv_path = tmp_path / "fer.csv"
    save_csv(split(ds, (0.6, 0.2, 0.2), 0), csv_path)
    cfg = {"input_shape": [1, 32, 32], "conv_channels": [4, 4, 4, 4, 4], "conv_kernel": [3, 3],
           "dropout_rates": [0.1] * 5, "seed": 1,
           "head": {"type": "fc", "kernel": {"kind": "linear"}, "hidden_units": 8, "num_classes": 3}}
    params = write_json(tmp_path / "p.json", {"max_epochs": 2, "batch_size": 4})
    rc = main(["train", "--config", write_json(tmp_path / "c.json", cfg), "--data", str(csv_path),
               "--out", str(tmp_path / "run"), "--params", params])
    assert rc == 0
    assert "test_accuracy" in json.loads((tmp_path / "run" / "result.json").read_text())


def test_shipped_configs_parse():
    from kdl.model import ModelConfig
    from kdl.train import TrainParams
    for name in ("fer_default.json", "spiral_kdl3.json"):
        ModelConfig.from_json(json.loads((ROOT / "configs" / name).read_text()))
    for name in ("train_default.json", "train_spiral.json"):
        TrainParams.from_json(json.loads((ROOT / "configs" / name).read_text()))
