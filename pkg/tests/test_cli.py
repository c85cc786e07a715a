import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import yaml
from PIL import Image

from ganomaly.checkpoint import load_checkpoint
from ganomaly.cli import main
from ganomaly.datasets import write_idx
from ganomaly.errors import NumericError
from ganomaly.evalmetrics import REPORT_SCHEMA
from ganomaly.scoring import LabelDependentScalingWarning
from ganomaly.trainer import read_telemetry

TOY = {
    "seed": 7,
    "output_dir": "runs",
    "dataset": {
        "kind": "synthetic",
        "synthetic": {"count": 40, "abnormal_ratio": 0.3, "test_normal_fraction": 0.3, "image_size": 32, "channels": 3},
    },
    "arch": {"input_size": 32, "channels": 3, "latent_dim": 16, "base_width": 4},
    "train": {"epochs": 2, "batch_size": 8, "checkpoint_every": 1},
    "scoring": {"calibration": {"holdout_abnormal": 3}},
}


def _write_cfg(tmp_path, doc=TOY, name="toy.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(tmp)
    assert main(["train", "--config", cfg]) == 0
    run_dir = next((tmp / "runs").iterdir())
    return cfg, run_dir


def test_prepare_is_deterministic(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    assert main(["prepare", "--config", cfg]) == 0
    a = _json_out(capsys)
    assert main(["prepare", "--config", cfg]) == 0
    b = _json_out(capsys)
    assert a["run_dir"] != b["run_dir"]
    assert Path(a["run_dir"]).parent == tmp_path / "runs"
    assert (Path(a["run_dir"]) / "split.json").read_text() == (Path(b["run_dir"]) / "split.json").read_text()
    assert a["train_normal"] + a["test_normal"] + a["test_abnormal"] == 40 and a["test_abnormal"] == 12


def test_train_outputs(trained_run):
    _, run_dir = trained_run
    rows = list(csv.reader(open(run_dir / "telemetry.csv")))
    assert len(rows) == 1 + TOY["train"]["epochs"]
    ck = load_checkpoint(run_dir / "checkpoints" / (run_dir / "checkpoints" / "latest").read_text().strip())
    assert ck.epoch == 2
    assert (run_dir / "run_log.json").exists() and (run_dir / "reference_range.json").exists()
    assert (run_dir / "split.json").exists() and (run_dir / "config.json").exists()


def test_evaluate_global(trained_run, capsys):
    cfg, run_dir = trained_run
    assert main(["evaluate", "--config", cfg, "--run-dir", str(run_dir), "--scaling", "global"]) == 0
    summary = _json_out(capsys)
    out = run_dir / "eval-v1-global"
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    split = json.loads((run_dir / "split.json").read_text())
    n_eval = len(split["test"]) - 3  # calibration holdout excluded
    c = report["confusion"]
    assert c["tp"] + c["fp"] + c["fn"] + c["tn"] == n_eval == report["n_samples"]
    assert report["calibration"]["mode"] == "holdout" and len(report["calibration"]["holdout_ids"]) == 3
    assert not set(report["calibration"]["holdout_ids"]) & {r["id"] for r in csv.DictReader(open(out / "scores.csv"))}
    assert summary["threshold"] in report["sweep"]["thresholds"]
    assert (out / "scatter.svg").read_text().startswith("<svg")


def test_evaluate_fixed_threshold(trained_run, capsys):
    cfg, run_dir = trained_run
    argv = ["evaluate", "--config", cfg, "--run-dir", str(run_dir), "--set", "scoring.calibration.mode=none", "--set", "eval.threshold=0.5"]
    assert main(argv) == 0
    report = json.loads((run_dir / "eval-v1-global" / "report.json").read_text())
    assert report["threshold"] == 0.5 and report["sweep"] is None
    c = report["confusion"]
    assert c["tp"] + c["fp"] + c["fn"] + c["tn"] == len(json.loads((run_dir / "split.json").read_text())["test"])


def test_evaluate_partitioned_warns(trained_run, capsys):
    cfg, run_dir = trained_run
    with pytest.warns(LabelDependentScalingWarning):
        assert main(["evaluate", "--config", cfg, "--run-dir", str(run_dir), "--scaling", "partitioned", "--variant", "v2"]) == 0
    captured = capsys.readouterr()
    assert "label_dependent" in captured.err
    report = json.loads((run_dir / "eval-v2-partitioned" / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["label_dependent"] is True and report["warnings"]


def test_evaluate_reference_range(trained_run, capsys):
    cfg, run_dir = trained_run
    assert main(["evaluate", "--config", cfg, "--run-dir", str(run_dir), "--scaling", "reference-range"]) == 0
    report = json.loads((run_dir / "eval-v1-reference-range" / "report.json").read_text())
    assert report["scaling"] == "reference-range" and report["label_dependent"] is False


def test_score_command(trained_run, tmp_path, capsys):
    cfg, run_dir = trained_run
    files = []
    for k in range(2):
        f = tmp_path / f"img{k}.png"
        Image.fromarray(np.random.default_rng(k).integers(0, 255, (50, 40, 3), dtype=np.uint8)).save(f)
        files.append(str(f))
    assert main(["score", "--config", cfg, "--run-dir", str(run_dir), *files]) == 0
    out = _json_out(capsys)
    assert [r["id"] for r in out["scores"]] == ["img0.png", "img1.png"]
    for r in out["scores"]:
        assert r["raw_score"] >= 0 and 0 <= r["scaled_score"] <= 1 and isinstance(r["novel"], bool)
    assert main(["score", "--config", cfg, "--run-dir", str(run_dir), str(tmp_path / "nope.png")]) == 3


def test_resume_matches_uninterrupted(tmp_path, capsys):
    full = _write_cfg(tmp_path, {**TOY, "train": {**TOY["train"], "epochs": 3}}, "full.yaml")
    assert main(["train", "--config", full, "--run-dir", str(tmp_path / "a")]) == 0
    short = _write_cfg(tmp_path, {**TOY, "train": {**TOY["train"], "epochs": 2}}, "short.yaml")
    assert main(["train", "--config", short, "--run-dir", str(tmp_path / "b")]) == 0
    assert main(["train", "--config", full, "--run-dir", str(tmp_path / "b"), "--resume"]) == 0
    a, b = read_telemetry(tmp_path / "a" / "telemetry.csv"), read_telemetry(tmp_path / "b" / "telemetry.csv")
    assert [r.epoch for r in b] == [1, 2, 3] and a == b


def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert main(["prepare", "--set", "train.epohcs=3"]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["prepare", "--config", str(tmp_path / "missing.yaml")]) == 2

    # data error: missing image file named by id
    (tmp_path / "imgs").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "imgs" / "a.png")
    manifest = {"images": [{"id": "a", "file": "imgs/a.png", "labels": ["car"]}, {"id": "lost-7", "file": "imgs/b.png", "labels": ["rider"]}]}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    doc = {"output_dir": "runs", "dataset": {"kind": "manifest", "manifest": "m.json"}}
    assert main(["prepare", "--config", _write_cfg(tmp_path, doc, "m.yaml")]) == 3
    assert "lost-7" in capsys.readouterr().err

    # numeric failure
    import ganomaly.trainer as tr

    def boom(state, batch):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(tr, "train_step", boom)
    assert main(["train", "--config", _write_cfg(tmp_path), "--run-dir", str(tmp_path / "n")]) == 4


def test_single_class_evaluation_fails(tmp_path, capsys):
    doc = {**TOY, "dataset": {**TOY["dataset"], "synthetic": {**TOY["dataset"]["synthetic"], "abnormal_ratio": 0.0}}}
    cfg = _write_cfg(tmp_path, {**doc, "train": {**TOY["train"], "epochs": 1}})
    assert main(["train", "--config", cfg, "--run-dir", str(tmp_path / "r")]) == 0
    assert main(["evaluate", "--config", cfg, "--run-dir", str(tmp_path / "r")]) == 3
    assert "single class" in capsys.readouterr().err


def test_manifest_prepare_counts(tmp_path, capsys):
    (tmp_path / "imgs").mkdir()
    labels = [["car"], ["car", "person"], ["rider"], ["train", "car"], ["bus"], ["bicycle"], ["truck"], ["motorcycle"], ["car"], ["sign"]]
    images = []
    for k, lab in enumerate(labels):
        Image.fromarray(np.full((12, 16, 3), k * 20, dtype=np.uint8)).save(tmp_path / "imgs" / f"{k}.png")
        images.append({"id": f"im{k}", "file": f"imgs/{k}.png", "labels": lab})
    (tmp_path / "m.json").write_text(json.dumps({"images": images}))
    doc = {
        "output_dir": "runs",
        "dataset": {"kind": "manifest", "manifest": "m.json", "test_normal": 2},
        "arch": {"input_size": 32, "channels": 3},
    }
    assert main(["prepare", "--config", _write_cfg(tmp_path, doc, "m.yaml")]) == 0
    out = _json_out(capsys)
    assert (out["train_normal"], out["test_normal"], out["test_abnormal"]) == (4, 2, 4)
    assert out["split_rule"]["novel_classes"] == ["bicycle", "motorcycle", "rider", "train"]


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    for part, n in (("train", 10), ("t10k", 4)):
        labels = np.repeat(np.arange(10), n).astype(np.uint8)
        images = np.zeros((len(labels), 28, 28), dtype=np.uint8)
        for i, d in enumerate(labels):
            # a bar whose position encodes the digit, plus noise
            images[i, 4 + 2 * d : 6 + 2 * d, 6:22] = 255
            images[i] = np.clip(images[i] + rng.integers(0, 30, (28, 28)), 0, 255)
        write_idx(images, labels, tmp_path / f"{part}-images-idx3-ubyte", tmp_path / f"{part}-labels-idx1-ubyte")
    return {
        "output_dir": "runs",
        "dataset": {
            "kind": "idx",
            "train_images": "train-images-idx3-ubyte",
            "train_labels": "train-labels-idx1-ubyte",
            "test_images": "t10k-images-idx3-ubyte",
            "test_labels": "t10k-labels-idx1-ubyte",
        },
        "arch": {"input_size": 32, "channels": 1, "latent_dim": 8, "base_width": 2},
        "train": {"epochs": 1, "batch_size": 16, "checkpoint_every": 0},
    }


def test_reproduce_mnist_single_digit(tmp_path, idx_files, capsys):
    cfg = _write_cfg(tmp_path, idx_files, "m.yaml")
    assert main(["reproduce-mnist", "--config", cfg, "--digits", "2", "--run-dir", str(tmp_path / "one")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "one" / "auc_table.csv")))
    assert [r["digit"] for r in rows] == ["2"]
    assert int(rows[0]["n_train"]) == 90 and int(rows[0]["n_test"]) == 40 + 10


def test_reproduce_mnist_table_shape(tmp_path, idx_files, capsys):
    cfg = _write_cfg(tmp_path, idx_files, "m.yaml")
    assert main(["reproduce-mnist", "--config", cfg, "--run-dir", str(tmp_path / "all")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "all" / "auc_table.csv")))
    assert [int(r["digit"]) for r in rows] == list(range(10))
    for r in rows:
        assert 0 <= float(r["auc_v1"]) <= 1 and 0 <= float(r["auc_v2"]) <= 1
    summary = json.loads((tmp_path / "all" / "auc_summary.json").read_text())
    assert set(summary["high_auc_digits"]) == {"v1", "v2"}
    assert main(["reproduce-mnist", "--config", cfg, "--digits", "11"]) == 2
