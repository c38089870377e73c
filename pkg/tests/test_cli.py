import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from tailcalib.cli import main
from tailcalib.store import (FeatureDataset, SyntheticWorldSpec,
                             read_feature_file, read_sidecar,
                             synth_gaussian_dataset, write_feature_file)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_world(path, k=6, per_class=40, d=4, seed=0, spread=0.35):
    rng = np.random.default_rng(seed)
    means = rng.uniform(2.0, 8.0, (k, d))
    covs = np.stack([spread ** 2 * np.eye(d)] * k)
    ds = synth_gaussian_dataset(
        SyntheticWorldSpec(means, covs, [per_class] * k, seed=seed))
    write_feature_file(ds, path)
    return ds


@pytest.fixture
def world(tmp_path):
    path = tmp_path / "full.tcfb"
    make_world(path)
    return path


def test_subsample_writes_profile_and_metadata(world, tmp_path):
    out = tmp_path / "sub"
    rc = main(["subsample", "--input", str(world), "--imbalance", "10",
               "--seed", "1", "--output", str(out)])
    assert rc == 0
    profile = json.loads((out / "profile.json").read_text())
    assert profile["head_count"] == 40
    assert profile["tail_count"] == 4
    meta = read_sidecar(out / "subsampled.tcfb")
    assert meta["rounding"] == "half-up"
    assert (out / "resolved_config.json").exists()
    assert (out / "manifest.json").exists()


def test_subsample_paper_scale_profile(tmp_path):
    # 500 per class, imbalance 100 -> head 500, tail 5
    path = tmp_path / "big.tcfb"
    rng = np.random.default_rng(0)
    k = 100
    feats = rng.standard_normal((500 * k, 2)).astype(np.float32)
    labels = np.repeat(np.arange(k), 500)
    write_feature_file(FeatureDataset(feats, labels, k), path)
    out = tmp_path / "sub100"
    rc = main(["subsample", "--input", str(path), "--imbalance", "100",
               "--output", str(out)])
    assert rc == 0
    profile = json.loads((out / "profile.json").read_text())
    assert profile["head_count"] == 500
    assert profile["tail_count"] == 5
    assert profile["imbalance_factor"] == 100.0


def test_subsample_imbalance_one_is_balanced_copy(world, tmp_path):
    out = tmp_path / "flat"
    rc = main(["subsample", "--input", str(world), "--imbalance", "1",
               "--output", str(out)])
    assert rc == 0
    ds = read_feature_file(out / "subsampled.tcfb")
    assert np.bincount(ds.labels).tolist() == [40] * 6


def test_missing_input_exits_1(tmp_path):
    rc = main(["subsample", "--input", str(tmp_path / "absent.tcfb"),
               "--output", str(tmp_path / "o")])
    assert rc == 1


def test_generate_outputs_and_balance(world, tmp_path):
    sub = tmp_path / "sub"
    main(["subsample", "--input", str(world), "--imbalance", "10",
          "--output", str(sub)])
    gen = tmp_path / "gen"
    rc = main(["generate", "--input", str(sub / "subsampled.tcfb"),
               "--neighbors", "2", "--output", str(gen), "--seed", "3"])
    assert rc == 0
    report = json.loads((gen / "generation_report.json").read_text())
    assert report["target_count"] == 40
    generated = read_feature_file(gen / "generated.tcfb")
    train = read_feature_file(sub / "subsampled.tcfb")
    combined = np.bincount(np.concatenate([train.labels, generated.labels]),
                           minlength=6)
    assert (combined == 40).all()
    assert read_sidecar(gen / "generated.tcfb")["synthetic"] is True


def test_generate_balanced_input_gives_empty_file(world, tmp_path):
    gen = tmp_path / "gen0"
    rc = main(["generate", "--input", str(world), "--neighbors", "2",
               "--output", str(gen)])
    assert rc == 0
    assert read_feature_file(gen / "generated.tcfb").n == 0


def test_generate_neighbors_above_k_exits_2(world, tmp_path):
    rc = main(["generate", "--input", str(world), "--neighbors", "7",
               "--output", str(tmp_path / "g")])
    assert rc == 2


def test_generate_deterministic_across_threads(world, tmp_path):
    sub = tmp_path / "sub"
    main(["subsample", "--input", str(world), "--imbalance", "10",
          "--output", str(sub)])
    args = ["generate", "--input", str(sub / "subsampled.tcfb"),
            "--neighbors", "2", "--seed", "5"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--output", str(out_a), "--threads", "1"]) == 0
    assert main(args + ["--output", str(out_b), "--threads", "8"]) == 0
    assert sha(out_a / "generated.tcfb") == sha(out_b / "generated.tcfb")
    assert sha(out_a / "generation_report.json") == sha(out_b / "generation_report.json")


def full_pipeline(tmp_path, mode="tailcalib", epochs=4):
    world_path = tmp_path / "world.tcfb"
    make_world(world_path, per_class=40)
    val_path = tmp_path / "val.tcfb"
    make_world(val_path, per_class=15, seed=99)
    sub = tmp_path / "sub"
    main(["subsample", "--input", str(world_path), "--imbalance", "10",
          "--output", str(sub)])
    train_dir = tmp_path / f"train_{mode}"
    rc = main(["train", "--input", str(sub / "subsampled.tcfb"),
               "--val", str(val_path), "--mode", mode,
               "--classifier", "cosine", "--epochs", str(epochs),
               "--neighbors", "2", "--lr", "0.05",
               "--output", str(train_dir), "--seed", "7"])
    return rc, sub, val_path, train_dir


def test_train_eval_roundtrip(tmp_path):
    rc, sub, val_path, train_dir = full_pipeline(tmp_path)
    assert rc == 0
    assert (train_dir / "classifier.ckpt").exists()
    assert (train_dir / "classifier_best.ckpt").exists()
    assert (train_dir / "training_curves.png").exists()
    log_lines = (train_dir / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 4
    assert all("val_accuracy" in json.loads(line) for line in log_lines)

    eval_dir = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(train_dir / "classifier.ckpt"),
               "--val", str(val_path), "--train", str(sub / "subsampled.tcfb"),
               "--many-min", "30", "--few-max", "10",
               "--output", str(eval_dir)])
    assert rc == 0
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert set(metrics) >= {"overall_accuracy", "many_accuracy", "mid_accuracy",
                            "few_accuracy", "split_thresholds"}
    assert metrics["split_thresholds"] == {"many_min": 30, "few_max": 10}
    assert (eval_dir / "per_class_accuracy.csv").exists()
    assert (eval_dir / "accuracy.png").exists()


def test_train_rerun_identical_checkpoint(tmp_path):
    rc_a, _, _, dir_a = full_pipeline(tmp_path, mode="tailcalibx", epochs=2)
    assert rc_a == 0
    dir_b = tmp_path / "again"
    sub = tmp_path / "sub"
    rc_b = main(["train", "--input", str(sub / "subsampled.tcfb"),
                 "--val", str(tmp_path / "val.tcfb"), "--mode", "tailcalibx",
                 "--classifier", "cosine", "--epochs", "2",
                 "--neighbors", "2", "--lr", "0.05",
                 "--output", str(dir_b), "--seed", "7"])
    assert rc_b == 0
    assert sha(dir_a / "classifier.ckpt") == sha(dir_b / "classifier.ckpt")
    assert sha(dir_a / "train_log.jsonl") == sha(dir_b / "train_log.jsonl")


def test_train_epochs_zero_exits_2(tmp_path, world):
    rc = main(["train", "--input", str(world), "--epochs", "0",
               "--output", str(tmp_path / "t")])
    assert rc == 2


def test_nn_report_command(world, tmp_path):
    sub = tmp_path / "sub"
    main(["subsample", "--input", str(world), "--imbalance", "10",
          "--output", str(sub)])
    out = tmp_path / "nn"
    rc = main(["nn-report", "--input", str(sub / "subsampled.tcfb"),
               "--bottom", "3", "--neighbors", "2", "--output", str(out)])
    assert rc == 0
    payload = json.loads((out / "nn_report.json").read_text())
    assert payload["bottom_n"] == 3
    assert len(payload["classes"]) == 3
    assert (out / "nn_report.csv").read_text().startswith(
        "class_id,train_count,rank,neighbor,count")
    assert (out / "neighbors.png").exists()


def test_project_command(world, tmp_path):
    gen = tmp_path / "gen"
    sub = tmp_path / "sub"
    main(["subsample", "--input", str(world), "--imbalance", "10",
          "--output", str(sub)])
    main(["generate", "--input", str(sub / "subsampled.tcfb"),
          "--neighbors", "2", "--output", str(gen)])
    out = tmp_path / "proj"
    rc = main(["project", "--input", str(sub / "subsampled.tcfb"),
               "--generated", str(gen / "generated.tcfb"),
               "--dims", "2", "--output", str(out)])
    assert rc == 0
    lines = (out / "projection.csv").read_text().splitlines()
    assert lines[0] == "x,y,label,is_generated"
    train_n = read_feature_file(sub / "subsampled.tcfb").n
    gen_n = read_feature_file(gen / "generated.tcfb").n
    assert len(lines) == 1 + train_n + gen_n
    meta = json.loads((out / "projection_meta.json").read_text())
    assert len(meta["explained_variance_ratios"]) == 2
    assert (out / "projection.png").exists()


def test_import_csv_command(tmp_path):
    src = tmp_path / "feats.csv"
    src.write_text("f0,f1,label\n1.0,2.0,b\n0.5,0.25,a\n2.0,1.0,b\n")
    out = tmp_path / "imported"
    rc = main(["import-csv", "--input", str(src), "--output", str(out)])
    assert rc == 0
    ds = read_feature_file(out / "features.tcfb")
    assert ds.n == 3 and ds.num_classes == 2
    label_map = json.loads((out / "label_map.json").read_text())
    assert label_map == {"a": 0, "b": 1}


def test_config_file_precedence(world, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("neighbors = 2\nseed = 5\nalpha = 0.1\n# comment\n")
    out = tmp_path / "gen_cfg"
    rc = main(["generate", "--input", str(world), "--config", str(cfg),
               "--alpha", "0.3", "--output", str(out)])
    assert rc == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["neighbors"] == 2   # from file
    assert resolved["seed"] == 5        # from file
    assert resolved["alpha"] == 0.3     # flag wins


def test_unknown_config_key_exits_2(world, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    rc = main(["generate", "--input", str(world), "--config", str(cfg),
               "--output", str(tmp_path / "x")])
    assert rc == 2


def test_manifest_lists_hashes(world, tmp_path):
    out = tmp_path / "gen_m"
    main(["generate", "--input", str(world), "--neighbors", "2",
          "--output", str(out)])
    manifest = json.loads((out / "manifest.json").read_text())
    names = {entry["path"] for entry in manifest["outputs"]}
    assert {"generated.tcfb", "generation_report.json"} <= names
    for entry in manifest["outputs"]:
        assert sha(out / entry["path"]) == entry["sha256"]


def test_module_entrypoint_subprocess(tmp_path):
    world_path = tmp_path / "w.tcfb"
    make_world(world_path, k=3, per_class=10)
    out = tmp_path / "o"
    proc = subprocess.run(
        [sys.executable, "-m", "tailcalib", "subsample", "--input",
         str(world_path), "--imbalance", "2", "--output", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "subsampled.tcfb").exists()
