import json

import numpy as np
import pytest

import motionbridge.cli as cli
from motionbridge.classifier import ActionClassifier, accuracy
from motionbridge.cli import run_cli
from motionbridge.data import load_dataset, read_sequences, write_sequences
from motionbridge.gradcheck import GradCheckReport


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = {
        "out_dir": str(d),
        "data": {"per_action": 3, "test_per_action": 2, "n_frames": 40},
        "vae": {"t_between": [8], "d": 16, "d_z": 8, "heads": 2, "layers": 1, "epochs": 1, "batch_size": 8},
        "mdm": {"steps": 3, "d": 16, "heads": 2, "layers": 1, "T": 20, "t_frames": 20, "batch_size": 8},
        "sampler": {"epochs": 1, "n_branches": 3, "batch_size": 8},
        "classifier": {"epochs": 2, "d": 16, "layers": 1},
        "predict": {"T_b": 8, "history_frames": 20},
    }
    path = d / "config.json"
    path.write_text(json.dumps(cfg))
    steps = [["gen-data"], ["train-vae"], ["train-mdm"], ["train-sampler"], ["train-classifier"]]
    for s in steps:
        assert run_cli(s + ["--config", str(path), "--seed", "1"]) == 0, s
    return d, str(path)


def test_training_commands_write_checkpoints(workdir):
    d, _ = workdir
    for name in ("dataset.jsonl", "vae_tb8.mfpk", "vae_tb8.json", "mdm.mfpk", "sampler_tb8.mfpk",
                 "classifier.mfpk"):
        assert (d / name).exists(), name
    assert len(load_dataset(d / "dataset.jsonl").train) == 24


def test_predict_writes_files_and_manifest(workdir, tmp_path):
    _, cfg = workdir
    out = tmp_path / "pred"
    assert run_cli(["predict", "--config", cfg, "--S", "3", "--out-dir", str(out), "--format", "csv"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["files"]) == 3
    assert manifest["request"]["S"] == 3 and manifest["seeds"]["request"] == 0
    for f in manifest["files"]:
        (seq,) = read_sequences(f["sequence"])
        assert len(seq) == 8 + 20
        assert (out / f["frames"].split("/")[-1]).exists()


def test_predict_is_reproducible(workdir, tmp_path):
    _, cfg = workdir
    texts = []
    for k in range(2):
        out = tmp_path / f"p{k}"
        assert run_cli(["predict", "--config", cfg, "--seed", "4", "--use-sampler", "--out-dir", str(out)]) == 0
        texts.append([(out / f"pred-4-{i}.jsonl").read_text() for i in range(3)])
    assert texts[0] == texts[1]


def test_rollout_and_inbetween(workdir, tmp_path):
    d, cfg = workdir
    assert run_cli(["rollout", "--config", cfg, "--pairs", "Wave:Walk,Reach:Run", "--out-dir",
                    str(tmp_path / "r")]) == 0
    (seq,) = read_sequences(tmp_path / "r" / "rollout-0.jsonl")
    assert len(seq) == 20 + 2 * 28
    assert run_cli(["rollout", "--config", cfg, "--pairs", "Wave", "--out-dir", str(tmp_path / "x")]) == 1
    seqs = read_sequences(d / "dataset.jsonl")
    src = tmp_path / "src.jsonl"
    write_sequences(src, [s for s in seqs if s.label < 4])
    assert run_cli(["inbetween", "--config", cfg, "--input", str(src), "--out", str(tmp_path / "i.jsonl"),
                    "--S", "2"]) == 0
    out = read_sequences(tmp_path / "i.jsonl")
    assert len(out) == 2 * 20 and all(len(s) == 5 + 8 + 5 for s in out)
    # the in-betweening model only knows the gait actions
    write_sequences(src, [s for s in seqs if s.label >= 4][:1])
    assert run_cli(["inbetween", "--config", cfg, "--input", str(src), "--out", str(tmp_path / "j.jsonl")]) == 1


def test_eval_ground_truth_as_prediction(workdir, tmp_path, capsys):
    d, cfg = workdir
    data = str(d / "dataset.jsonl")
    capsys.readouterr()
    assert run_cli(["eval", "--config", cfg, "--pred", data, "--gt", data, "--split", "test",
                    "--out", str(tmp_path / "m.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((tmp_path / "m.json").read_text())
    assert report["ade"] == 0.0
    split = load_dataset(data)
    clf = ActionClassifier.load(d / "classifier.mfpk")
    assert report["af"] == pytest.approx(accuracy(clf, split.test))


def test_grad_check_exit_codes(monkeypatch, capsys):
    good = GradCheckReport({"Linear": 1e-9}, 1e-3)
    bad = GradCheckReport({"Linear": 0.5}, 1e-3)
    monkeypatch.setattr(cli, "run_suite", lambda seed, tolerance: good)
    assert run_cli(["grad-check"]) == 0
    monkeypatch.setattr(cli, "run_suite", lambda seed, tolerance: bad)
    assert run_cli(["grad-check", "--seeds", "2"]) == 1
    assert "FAILED" in capsys.readouterr().out


def test_gen_data_flags(tmp_path):
    out = tmp_path / "d.jsonl"
    assert run_cli(["gen-data", "--actions", "Walk,Wave", "--per-action", "2", "--frames", "15",
                    "--turn-range", "0.5", "--seed", "2", "--out", str(out)]) == 0
    split = load_dataset(out)
    assert len(split.train) == 4 and all(len(s) == 15 for s in split.train)
    assert {s.action.name for s in split.train} == {"Walk", "Wave"}
    assert run_cli(["gen-data", "--actions", "Moonwalk", "--out", str(out)]) == 1


def test_usage_errors(tmp_path, capsys):
    assert run_cli(["frobnicate"]) == 2
    assert run_cli(["predict", "--bogus"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli(["gen-data", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert run_cli(["gen-data", "--config", str(bad)]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_checkpoints_fail_cleanly(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out_dir": str(tmp_path / "empty")}))
    assert run_cli(["predict", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_untrained_length_rejected(workdir, tmp_path, capsys):
    _, cfg = workdir
    assert run_cli(["predict", "--config", cfg, "--t-between", "40", "--out-dir", str(tmp_path / "o")]) == 1
