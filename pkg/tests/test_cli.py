import json
from pathlib import Path

import numpy as np
import pytest

from xaln import cli, pipeline, tensorfile


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 16-clip synthetic corpus taken through synth, prepare-data and train-w2v."""
    root = tmp_path_factory.mktemp("ws")
    assert cli.main(["synth", "--n", "16", "--seconds", "2.5", "--test-fraction", "0.5", "--out", str(root / "corpus")]) == 0
    assert cli.main(["prepare-data", "--manifest", str(root / "corpus/manifest.jsonl"), "--out", str(root / "prep")]) == 0
    assert cli.main(["train-w2v", "--manifest", str(root / "corpus/manifest.jsonl"), "--dim", "128",
                     "--epochs", "3", "--out", str(root / "w2v")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"variant": "w2v-128-1h", "epochs": 2, "batch_size": 4, "seed": 1}))
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "prep"), "--w2v", str(root / "w2v"),
                     "--out", str(root / "run")]) == 0
    return root


def test_error_line_is_json(capsys, tmp_path):
    code, _, err = run(capsys, "prepare-data", "--manifest", tmp_path / "nope.jsonl", "--out", tmp_path / "o")
    assert code == 2
    line = err.strip().splitlines()[-1]
    assert json.loads(line)["error"] == "manifest"


def test_prepare_data_outputs_and_idempotence(capsys, tmp_path, workspace):
    files = sorted(p.name for p in (workspace / "prep" / "patches").iterdir())
    assert len(files) == 16
    assert (workspace / "prep" / "scaling.json").is_file()
    code, out, _ = run(capsys, "prepare-data", "--manifest", workspace / "corpus/manifest.jsonl", "--out", tmp_path / "p2")
    assert code == 0 and out.startswith("prepared\t16")
    for name in files + ["../scaling.json", "../index.jsonl"]:
        assert (workspace / "prep/patches" / name).read_bytes() == (tmp_path / "p2/patches" / name).read_bytes()


def test_three_clip_manifest(capsys, tmp_path, workspace):
    lines = (workspace / "corpus/manifest.jsonl").read_text().splitlines()[:3]
    m = workspace / "corpus" / "three.jsonl"
    m.write_text("\n".join(lines) + "\n")
    assert run(capsys, "prepare-data", "--manifest", m, "--out", tmp_path / "p3")[0] == 0
    assert len(list((tmp_path / "p3/patches").iterdir())) == 3
    t, _ = tensorfile.load(next((tmp_path / "p3/patches").iterdir()))
    assert t["patch"].shape == (96, 96) and t["mfcc"].shape == (120,)


def test_missing_audio_names_the_clip(capsys, tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text(json.dumps({"id": "ghost-7", "audio_path": "missing.wav", "tags": ["x"]}) + "\n")
    code, _, err = run(capsys, "prepare-data", "--manifest", m, "--out", tmp_path / "o")
    assert code == 2 and "ghost-7" in err


def test_train_w2v_shapes_determinism_and_empty(capsys, tmp_path, workspace):
    wv = pipeline.load_word_vectors(workspace / "w2v")
    assert wv.table.shape == (len(wv.vocab), 128)
    run(capsys, "train-w2v", "--manifest", workspace / "corpus/manifest.jsonl", "--dim", "128", "--epochs", "3",
        "--out", tmp_path / "again")
    assert (tmp_path / "again/table.xt").read_bytes() == (workspace / "w2v/table.xt").read_bytes()
    empty = tmp_path / "empty.jsonl"
    empty.write_text(json.dumps({"id": "a", "audio_path": "a.wav", "tags": ["the", "and"]}) + "\n")
    code, _, err = run(capsys, "train-w2v", "--manifest", empty, "--dim", "8", "--out", tmp_path / "e")
    assert code == 2 and "empty" in err


def test_seed_environment_override(capsys, tmp_path, workspace, monkeypatch):
    monkeypatch.setenv("XALN_SEED", "5")
    run(capsys, "train-w2v", "--manifest", workspace / "corpus/manifest.jsonl", "--dim", "128", "--epochs", "3",
        "--out", tmp_path / "s5")
    assert (tmp_path / "s5/table.xt").read_bytes() != (workspace / "w2v/table.xt").read_bytes()
    monkeypatch.setenv("XALN_SEED", "x")
    code, _, err = run(capsys, "train-w2v", "--manifest", workspace / "corpus/manifest.jsonl", "--dim", "8",
                       "--out", tmp_path / "bad")
    assert code == 2 and json.loads(err.strip())["error"] == "usage"


def test_train_outputs(workspace):
    lines = (workspace / "run/metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 1, 2, 2]
    assert (workspace / "run/final.ckpt").is_file()


def test_train_rejects_unknown_keys_and_dim_mismatch(capsys, tmp_path, workspace):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
    code, _, err = run(capsys, "train", "--config", bad, "--data", workspace / "prep", "--w2v", workspace / "w2v",
                       "--out", tmp_path / "r")
    assert code == 2 and "learning_rate" in err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"variant": "w2v-1152-1h", "epochs": 1, "batch_size": 4}))
    code, _, err = run(capsys, "train", "--config", cfg, "--data", workspace / "prep", "--w2v", workspace / "w2v",
                       "--out", tmp_path / "r")
    assert code == 2 and json.loads(err.strip())["error"] == "config-mismatch"
    assert not (tmp_path / "r").exists()


def test_train_resume_matches_uninterrupted(capsys, tmp_path, workspace):
    cfg = workspace / "cfg.json"
    common = ["--config", cfg, "--data", workspace / "prep", "--w2v", workspace / "w2v"]
    assert run(capsys, "train", *common, "--out", tmp_path / "a", "--stop-after-epoch", "1")[0] == 0
    assert run(capsys, "train", *common, "--out", tmp_path / "a", "--resume", tmp_path / "a/last.ckpt")[0] == 0
    assert (tmp_path / "a/final.ckpt").read_bytes() == (workspace / "run/final.ckpt").read_bytes()


def test_gradcheck_output_and_exit_codes(capsys, monkeypatch):
    code, out, _ = run(capsys, "gradcheck", "--samples", "12")
    last = out.strip().splitlines()[-1].split("\t")
    assert code == 0 and last[0] == "max_rel_error" and last[2].startswith("worst=") and last[3] == "pass"
    monkeypatch.setattr(cli, "GRADCHECK_TOLERANCE", 0.0)
    code, out, _ = run(capsys, "gradcheck", "--samples", "12")
    assert code == 1 and "FAIL" in out


def test_probe_mfcc_and_checkpoint(capsys, tmp_path, workspace):
    m = workspace / "corpus/manifest.jsonl"
    pc = tmp_path / "probe.json"
    pc.write_text(json.dumps({"epochs": 3, "repeats": 10}))
    code, out, _ = run(capsys, "probe", "--task-manifest", m, "--mfcc", "--probe-config", pc, "--out", tmp_path)
    assert code == 0 and "mfcc" in out
    res = json.loads((tmp_path / "manifest_mfcc.json").read_text())
    assert len(res["per_run_accuracies"]) == 10 and res["protocol"] == "fixed-split"
    code, out, _ = run(capsys, "probe", "--task-manifest", m, "--checkpoint", workspace / "run/final.ckpt",
                       "--probe-config", pc, "--out", tmp_path)
    assert code == 0
    res = json.loads((tmp_path / "manifest_w2v-128-1h.json").read_text())
    assert res["config_digest"] and 0 <= res["mean"] <= 1
    code, _, _ = run(capsys, "probe", "--task-manifest", m, "--checkpoint", workspace / "run/final.ckpt", "--tags",
                     "--w2v", workspace / "w2v", "--probe-config", pc, "--task", "tagtask", "--out", tmp_path)
    assert code == 0 and (tmp_path / "tagtask_w2v-128-1h.json").is_file()


def test_probe_fold_protocol(capsys, tmp_path, workspace):
    recs = [json.loads(l) for l in (workspace / "corpus/manifest.jsonl").read_text().splitlines()]
    for i, r in enumerate(recs):
        r["split"] = f"fold{i % 2}"
        r["audio_path"] = str(workspace / "corpus" / r["audio_path"])
    m = tmp_path / "folds.jsonl"
    m.write_text("".join(json.dumps(r) + "\n" for r in recs))
    pc = tmp_path / "probe.json"
    pc.write_text(json.dumps({"epochs": 2, "repeats": 2}))
    code, out, _ = run(capsys, "probe", "--task-manifest", m, "--mfcc", "--probe-config", pc, "--out", tmp_path)
    assert code == 0 and "2-fold" in out


def test_retrieve(capsys, workspace):
    m = workspace / "corpus/manifest.jsonl"
    base = ["retrieve", "--checkpoint", workspace / "run/final.ckpt", "--w2v", workspace / "w2v", "--index-manifest", m]
    code, out, _ = run(capsys, *base, "--query-tags", "bell,chimes", "--k", "100")
    rows = [l.split("\t") for l in out.strip().splitlines()]
    assert code == 0 and len(rows) == 16 and [int(r[0]) for r in rows] == list(range(1, 17))
    scores = [float(r[2]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    code, _, err = run(capsys, *base, "--query-tags", "bell,kazoo")
    assert code == 2 and json.loads(err.strip())["error"] == "out-of-vocabulary" and "kazoo" in err
    wav = sorted((workspace / "corpus/audio").iterdir())[0]
    code, out, _ = run(capsys, *base, "--query-audio", wav, "--k", "3")
    assert code == 0 and len(out.strip().splitlines()) == 3


def test_report_writes_figures_and_tables(capsys, tmp_path, workspace):
    res = tmp_path / "r.json"
    res.write_text(json.dumps({"task": "t", "variant": "v", "protocol": "fixed-split", "per_run_accuracies": [0.5, 0.7],
                               "mean": 0.6, "std": 0.1, "config_digest": "x", "probe_config": {}}))
    code, out, _ = run(capsys, "report", "--runs", workspace / "run", "--results", res, "--out", tmp_path / "rep")
    assert code == 0
    names = {p.name for p in (tmp_path / "rep").iterdir()}
    assert names == {"loss_curves.png", "metrics.csv", "probe_accuracy.png", "probe_results.csv"}
    assert (tmp_path / "rep/loss_curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    csv_lines = (tmp_path / "rep/metrics.csv").read_text().splitlines()
    assert csv_lines[0] == "run,epoch,split,loss_total,loss_gkl,loss_ntxent" and len(csv_lines) == 5
    code, _, err = run(capsys, "report", "--out", tmp_path / "x")
    assert code == 2


def test_manifest_validation(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text('{"id": "a", "audio_path": "x.wav"}\n{"id": "a", "audio_path": "y.wav"}\n')
    with pytest.raises(pipeline.ManifestError, match="duplicate"):
        pipeline.read_manifest(m)
    m.write_text('{"id": "a", "audio_path": "x.wav", "colour": 1}\n')
    with pytest.raises(pipeline.ManifestError):
        pipeline.read_manifest(m)
