"""Command-line pipeline: subsample, generate, train, eval, nn-report, project.

Every command resolves its configuration as flags > config file > defaults,
writes its primary outputs plus resolved_config.json and manifest.json under
--output, and keeps wall-clock info in a separate run_info.json so reruns with
the same config and seed are byte-identical. Report commands render matplotlib
figures next to their delimited output. Exit codes: 0 success, 1 I/O,
2 validation, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import BaselineSpec
from .calibrate import GenerationConfig, pipeline_features, run_generation
from .classifier import (TrainConfig, epoch_provider, load_checkpoint,
                         save_checkpoint, train_classifier)
from .config import parse_config_file, resolve, write_json, write_run_outputs
from .errors import (CorruptionError, FormatError, NumericalError,
                     TailCalibError, ValidationError)
from .evaluate import evaluate, nn_report, pca_project
from .store import (ClassProfile, FeatureDataset, class_profile,
                    make_longtail_counts, read_feature_csv, read_feature_file,
                    subsample_longtail, write_feature_file)
from .transform import class_statistics

_COMMON_DEFAULTS = {"threads": 1}

_GENERATION_DEFAULTS = {
    # Generation defaults follow the strongest-imbalance configuration.
    "tukey": 1.0,
    "no_transform": False,
    "neighbors": 3,
    "alpha": 0.0,
    "normalize": True,
    "target": 0,  # 0 = balance up to the largest class
    "signed_power": False,
    "raw_stats": False,
    "max_jitter": 1e-4,
}

_TRAIN_DEFAULTS = {
    "mode": "plain",
    "classifier": "linear",
    "epochs": 50,
    "batch_size": 128,
    "lr": 0.001,
    "lr_schedule": "constant",
    "momentum": 0.9,
    "weight_decay": 5e-5,
    "init_scale": 16.0,
    "noise_scale": 0.01,
    "mixup_alpha": 0.01,
}


def _resolved(args: argparse.Namespace, defaults: dict) -> dict:
    file_values = parse_config_file(args.config) if args.config else {}
    flag_values = {k: v for k, v in vars(args).items()
                   if k not in ("func", "config")}
    merged_defaults = dict(defaults)
    for key, value in flag_values.items():
        merged_defaults.setdefault(key, None)
    return resolve(merged_defaults, file_values, flag_values)


def _generation_config(res: dict) -> GenerationConfig:
    return GenerationConfig(
        tukey_lambda=None if res["no_transform"] else res["tukey"],
        n_neighbors=res["neighbors"],
        spread=res["alpha"],
        normalize=res["normalize"],
        seed=res["seed"],
        target_count=res["target"] or None,
        signed_power=res["signed_power"],
        raw_statistics=res["raw_stats"],
        max_jitter=res["max_jitter"],
    )


def _add_generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tukey", type=float, default=None,
                   help="power-ladder exponent (default 1.0)")
    p.add_argument("--no-transform", action=argparse.BooleanOptionalAction,
                   default=None, help="skip the power-ladder transform entirely")
    p.add_argument("--neighbors", type=int, default=None,
                   help="nearest class centroids per instance (default 3)")
    p.add_argument("--alpha", type=float, default=None,
                   help="covariance spread constant (default 0.0)")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction,
                   default=None, help="row-normalize before and after generation")
    p.add_argument("--target", type=int, default=None,
                   help="per-class total after balancing (default: largest class)")
    p.add_argument("--signed-power", action=argparse.BooleanOptionalAction,
                   default=None, help="allow negative features via sign(x)*|x|^lambda")
    p.add_argument("--raw-stats", action=argparse.BooleanOptionalAction,
                   default=None, help="estimate class statistics on untransformed features")
    p.add_argument("--max-jitter", type=float, default=None,
                   help="largest diagonal jitter for covariance repair")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None,
                   help="key=value config file (flags still win)")
    p.add_argument("--output", type=str, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="parallelism cap; results never depend on it")


def _outdir(res: dict) -> Path:
    out = Path(res["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_import_csv(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, "seed": 0})
    outdir = _outdir(res)
    dataset, label_map = read_feature_csv(res["input"])
    out_path = outdir / "features.tcfb"
    write_feature_file(dataset, out_path)
    map_path = outdir / "label_map.json"
    write_json(map_path, {str(k): v for k, v in label_map.items()})
    write_run_outputs(outdir, res, [out_path, map_path])
    return 0


def cmd_subsample(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, "seed": 0, "imbalance": 100.0,
                           "head": 0, "rounding": "half-up"})
    outdir = _outdir(res)
    dataset = read_feature_file(res["input"])
    profile = class_profile(dataset)
    if profile.empty_classes:
        raise ValidationError(
            f"input has empty classes {list(profile.empty_classes)}; cannot subsample"
        )
    n_head = res["head"] or profile.tail_count  # smallest class bounds every quota
    counts = make_longtail_counts(n_head, dataset.num_classes, res["imbalance"],
                                  rounding=res["rounding"])
    subsampled = subsample_longtail(dataset, counts, res["seed"])
    out_path = outdir / "subsampled.tcfb"
    write_feature_file(subsampled, out_path, metadata={
        "imbalance_factor": res["imbalance"],
        "rounding": res["rounding"],
        "seed": res["seed"],
        "counts": [int(c) for c in counts],
    })
    profile_path = outdir / "profile.json"
    write_json(profile_path, class_profile(subsampled).to_dict())
    write_run_outputs(outdir, res, [out_path, profile_path])
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, **_GENERATION_DEFAULTS, "seed": 0})
    outdir = _outdir(res)
    dataset = read_feature_file(res["input"])
    cfg = _generation_config(res)
    outcome = run_generation(dataset, cfg)
    gen_path = outdir / "generated.tcfb"
    write_feature_file(outcome.generated, gen_path, metadata={
        "synthetic": True,
        "source": str(res["input"]),
        "config": cfg.to_dict(),
    })
    report_path = outdir / "generation_report.json"
    write_json(report_path, outcome.report())
    write_run_outputs(outdir, res, [gen_path, report_path])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, **_GENERATION_DEFAULTS,
                           **_TRAIN_DEFAULTS, "seed": 0})
    outdir = _outdir(res)
    dataset = read_feature_file(res["input"])
    val = read_feature_file(res["val"]) if res.get("val") else None
    kind_map = {"oversample": "oversample", "noise": "gaussian_noise",
                "mixup": "feature_mixup"}
    baseline = None
    if res["mode"] in kind_map:
        baseline = BaselineSpec(kind=kind_map[res["mode"]],
                                noise_scale=res["noise_scale"],
                                mixup_alpha=res["mixup_alpha"],
                                seed=res["seed"])
    tcfg = TrainConfig(
        epochs=res["epochs"],
        batch_size=res["batch_size"],
        learning_rate=res["lr"],
        lr_schedule=res["lr_schedule"],
        momentum=res["momentum"],
        weight_decay=res["weight_decay"],
        seed=res["seed"],
        mode=res["mode"],
        generation=_generation_config(res),
        baseline=baseline,
        classifier_kind=res["classifier"],
        init_scale=res["init_scale"],
    )
    clf, log = train_classifier(epoch_provider(dataset, tcfg), val, tcfg)

    ckpt_path = outdir / "classifier.ckpt"
    save_checkpoint(clf, ckpt_path, metadata={
        "mode": clf.mode, "num_classes": clf.num_classes, "dim": clf.dim,
        "scale": clf.scale if clf.mode == "cosine" else None,
        "train_config": tcfg.to_dict(),
    })
    outputs = [ckpt_path]
    if log.best is not None:
        best_path = outdir / "classifier_best.ckpt"
        save_checkpoint(log.best, best_path, metadata={
            "mode": log.best.mode, "best_epoch": log.best_epoch,
        })
        outputs.append(best_path)
    log_path = outdir / "train_log.jsonl"
    with open(log_path, "w") as fh:
        for record in log.records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    outputs.append(log_path)

    from .figures import save_training_curves
    fig_path = outdir / "training_curves.png"
    save_training_curves(log.records, fig_path)
    outputs.append(fig_path)
    write_run_outputs(outdir, res, outputs)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, "seed": 0,
                           "many_min": 100, "few_max": 20})
    outdir = _outdir(res)
    clf = load_checkpoint(res["checkpoint"])
    val = read_feature_file(res["val"])
    if res.get("train"):
        profile = class_profile(read_feature_file(res["train"]))
    elif res.get("profile"):
        payload = json.loads(Path(res["profile"]).read_text())
        profile = ClassProfile(np.asarray(payload["counts"], dtype=np.int64))
    else:
        raise ValidationError("need --train (TCFB) or --profile (JSON) for the class counts")
    metrics = evaluate(clf, val, profile, (res["many_min"], res["few_max"]))

    metrics_path = outdir / "metrics.json"
    write_json(metrics_path, metrics.to_dict())
    csv_path = outdir / "per_class_accuracy.csv"
    with open(csv_path, "w") as fh:
        fh.write("class_id,train_count,group,accuracy\n")
        for c in range(val.num_classes):
            fh.write(f"{c},{int(profile.counts[c])},{metrics.class_groups[c]},"
                     f"{metrics.per_class_accuracy[c]!r}\n")

    from .figures import save_accuracy_figure
    fig_path = outdir / "accuracy.png"
    save_accuracy_figure(metrics.per_class_accuracy, np.asarray(profile.counts),
                         metrics.class_groups, fig_path)
    write_run_outputs(outdir, res, [metrics_path, csv_path, fig_path])
    return 0


def cmd_nn_report(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, **_GENERATION_DEFAULTS,
                           "seed": 0, "bottom": 15})
    outdir = _outdir(res)
    dataset = read_feature_file(res["input"])
    cfg = _generation_config(res)
    base, transformed = pipeline_features(dataset, cfg)
    stats_space = base if cfg.raw_statistics else transformed
    stats = class_statistics(FeatureDataset(stats_space, dataset.labels,
                                            dataset.num_classes))
    report = nn_report(stats, dataset, cfg, res["bottom"])

    json_path = outdir / "nn_report.json"
    write_json(json_path, {"bottom_n": res["bottom"], "config": cfg.to_dict(),
                           "classes": report})
    csv_path = outdir / "nn_report.csv"
    with open(csv_path, "w") as fh:
        fh.write("class_id,train_count,rank,neighbor,count\n")
        for row in report:
            for rank, (neighbor, count) in enumerate(row["top_neighbors"], start=1):
                fh.write(f"{row['class_id']},{row['train_count']},{rank},"
                         f"{neighbor},{count}\n")

    from .figures import save_neighbor_figure
    fig_path = outdir / "neighbors.png"
    save_neighbor_figure(report, fig_path)
    write_run_outputs(outdir, res, [json_path, csv_path, fig_path])
    return 0


def cmd_project(args: argparse.Namespace) -> int:
    res = _resolved(args, {**_COMMON_DEFAULTS, "seed": 0, "dims": 2,
                           "generated": ""})
    outdir = _outdir(res)
    dataset = read_feature_file(res["input"])
    feats = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    is_generated = np.zeros(dataset.n, dtype=bool)
    if res.get("generated"):
        gen = read_feature_file(res["generated"])
        if gen.dim != dataset.dim:
            raise ValidationError(
                f"generated features have dim {gen.dim}, expected {dataset.dim}"
            )
        feats = np.concatenate([feats, np.asarray(gen.features, dtype=np.float64)])
        labels = np.concatenate([labels, np.asarray(gen.labels)])
        is_generated = np.concatenate([is_generated, np.ones(gen.n, dtype=bool)])

    projected, ratios = pca_project(feats, res["dims"])
    names = ["x", "y"] + [f"c{i}" for i in range(2, projected.shape[1])]
    csv_path = outdir / "projection.csv"
    with open(csv_path, "w") as fh:
        fh.write(",".join(names[: projected.shape[1]]) + ",label,is_generated\n")
        for i in range(projected.shape[0]):
            coords = ",".join(repr(float(v)) for v in projected[i])
            fh.write(f"{coords},{int(labels[i])},{int(is_generated[i])}\n")
    meta_path = outdir / "projection_meta.json"
    write_json(meta_path, {
        "requested_dims": res["dims"],
        "returned_dims": int(projected.shape[1]),
        "explained_variance_ratios": [float(r) for r in ratios],
    })

    outputs = [csv_path, meta_path]
    if projected.shape[1] >= 2:
        from .figures import save_projection_figure
        fig_path = outdir / "projection.png"
        save_projection_figure(projected, labels, is_generated, fig_path)
        outputs.append(fig_path)
    write_run_outputs(outdir, res, outputs)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailcalib",
        description="Feature-space rebalancing for long-tail classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import-csv", help="convert a f0,...,label CSV to TCFB")
    p.add_argument("--input", required=True)
    _add_common_flags(p)
    p.set_defaults(func=cmd_import_csv)

    p = sub.add_parser("subsample", help="carve a long-tail split out of a feature file")
    p.add_argument("--input", required=True)
    p.add_argument("--imbalance", type=float, default=None,
                   help="head/tail count ratio (default 100)")
    p.add_argument("--head", type=int, default=None,
                   help="head-class count (default: smallest class of the input)")
    p.add_argument("--rounding", choices=("half-up", "floor", "ceil"), default=None)
    _add_common_flags(p)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("generate", help="generate calibrated balancing features")
    p.add_argument("--input", required=True)
    _add_generation_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a classifier on (rebalanced) features")
    p.add_argument("--input", required=True)
    p.add_argument("--val", default=None, help="balanced validation TCFB")
    p.add_argument("--mode", choices=("plain", "tailcalib", "tailcalibx",
                                      "oversample", "noise", "mixup"), default=None)
    p.add_argument("--classifier", choices=("linear", "cosine"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", choices=("constant", "cosine-decay"), default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--init-scale", type=float, default=None,
                   help="initial cosine scale, softplus(gamma_raw)")
    p.add_argument("--noise-scale", type=float, default=None)
    p.add_argument("--mixup-alpha", type=float, default=None)
    _add_generation_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy with many/mid/few breakdown")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--train", default=None, help="training TCFB (for class counts)")
    p.add_argument("--profile", default=None, help="profile JSON (for class counts)")
    p.add_argument("--many-min", type=int, default=None)
    p.add_argument("--few-max", type=int, default=None)
    _add_common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nn-report", help="neighbor frequencies for the smallest classes")
    p.add_argument("--input", required=True)
    p.add_argument("--bottom", type=int, default=None,
                   help="how many tail classes to report (default 15)")
    _add_generation_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_nn_report)

    p = sub.add_parser("project", help="2-d PCA export of a feature file")
    p.add_argument("--input", required=True)
    p.add_argument("--generated", default=None,
                   help="optional generated TCFB to overlay (marked is_generated)")
    p.add_argument("--dims", type=int, default=None)
    _add_common_flags(p)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CorruptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TailCalibError as exc:  # anything else from this package
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
