"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Every tolerance is pinned here; nothing is deferred to calibration.
"""
import hashlib
import json
import time

import numpy as np
import pytest

from tailcalib.calibrate import (CalibratedGaussian, GenerationConfig,
                                 calibrated_distribution, generate_balanced,
                                 generation_quotas, nearest_class_means,
                                 run_generation)
from tailcalib.classifier import (TrainConfig, epoch_provider, init_classifier,
                                  logits, loss_and_grads, softmax_ce_loss,
                                  train_classifier)
from tailcalib.cli import main
from tailcalib.evaluate import evaluate
from tailcalib.sampler import cholesky_psd, sample_gaussian
from tailcalib.store import (ClassProfile, FeatureDataset, SyntheticWorldSpec,
                             make_longtail_counts, synth_gaussian_dataset,
                             write_feature_file)
from tailcalib.transform import ClassStats, class_statistics, tukey_transform


def report(name):
    print(f"\nACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# Balance invariant
# ---------------------------------------------------------------------------

def test_balance_invariant():
    """Every class ends at exactly target_count rows; < 1 s per case."""
    rng = np.random.default_rng(2024)
    for case in range(8):
        factor = [10.0, 100.0][case % 2]
        k = int(rng.integers(3, 21))
        d = int(rng.integers(2, 17))
        counts = make_longtail_counts(int(rng.integers(25, 90)), k, factor)
        means = rng.standard_normal((k, d)) * 2.0
        covs = np.stack([0.4 * np.eye(d)] * k)
        ds = synth_gaussian_dataset(SyntheticWorldSpec(means, covs, counts,
                                                       seed=case))
        start = time.time()
        gen = generate_balanced(ds, GenerationConfig(
            n_neighbors=min(3, k), seed=case, normalize=False))
        elapsed = time.time() - start
        combined = np.bincount(np.concatenate([ds.labels, gen.labels]),
                               minlength=k)
        assert (combined == counts.max()).all(), f"case {case} not balanced"
        assert elapsed < 1.0, f"case {case} took {elapsed:.2f}s"
    report("balance invariant")


# ---------------------------------------------------------------------------
# Quota arithmetic
# ---------------------------------------------------------------------------

def test_quota_arithmetic():
    """G_k = N_1 - N_k totals exact for 1,000 random count vectors."""
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k = int(rng.integers(1, 30))
        counts = rng.integers(1, 500, size=k)
        if rng.random() < 0.3:
            counts[rng.integers(0, k)] = counts.max()  # duplicated heads
        target = int(counts.max())
        plan = generation_quotas(counts, target, seed=int(rng.integers(2**31)))
        for c in range(k):
            deficit = target - int(counts[c])
            assert plan.total(c) == deficit
            draws = sorted((n for _, n in plan.assignments[c]), reverse=True)
            if deficit == 0:
                assert draws == []
                continue
            quota = (target - 1) // int(counts[c])
            full, remainder = divmod(deficit, quota)
            expected = [quota] * full + ([remainder] if remainder else [])
            assert draws == sorted(expected, reverse=True)
            positions = [i for i, _ in plan.assignments[c]]
            assert len(positions) == len(set(positions))
    report("quota arithmetic")


# ---------------------------------------------------------------------------
# Calibration oracle
# ---------------------------------------------------------------------------

def brute_force_midpoint(z, class_means):
    """Independent oracle: nearest centroid by explicit scan, then midpoint."""
    best, best_d = None, np.inf
    for k in range(class_means.shape[0]):
        d = float(np.sqrt(((z - class_means[k]) ** 2).sum()))
        if d < best_d:
            best, best_d = k, d
    return (class_means[best] + z) / 2.0


def test_calibration_oracle_end_to_end():
    """Zero class covariances: generated rows equal brute-force midpoints."""
    # classes of repeated points have exactly zero sample covariance
    points = np.array([[0.5, 2.0], [4.0, 1.0], [2.0, 6.0], [7.0, 7.0]])
    reps = [9, 5, 3, 1]
    ds = FeatureDataset(np.repeat(points, reps, axis=0),
                        np.repeat(np.arange(4), reps), 4)
    cfg = GenerationConfig(tukey_lambda=1.0, n_neighbors=1, spread=0.0,
                           normalize=False, seed=13)
    outcome = run_generation(ds, cfg)
    means = outcome.stats.means
    gen = outcome.generated
    feats = np.asarray(ds.features, float)
    for i in range(gen.n):
        label = int(gen.labels[i])
        sources = feats[ds.labels == label]
        errs = [np.abs(gen.features[i] - brute_force_midpoint(z, means)).max()
                for z in sources]
        assert min(errs) < 1e-12
    report("calibration oracle (end to end)")


def test_calibration_oracle_composed_path():
    """Same rule on spread data with covariances forced to zero."""
    rng = np.random.default_rng(31)
    k, d = 5, 3
    feats = rng.standard_normal((60, d)) * 2.0
    labels = rng.integers(0, k, size=60)
    labels[:k] = np.arange(k)
    real = class_statistics(FeatureDataset(feats, labels, k))
    zeroed = ClassStats(real.means, np.zeros((k, d, d)), real.counts)
    for i in range(60):
        z = feats[i].astype(float)
        nbrs = nearest_class_means(z, zeroed, 1)
        dist = calibrated_distribution(z, nbrs, zeroed, spread=0.0,
                                       label=int(labels[i]))
        draws = sample_gaussian(dist, 3, stream=(1, i))
        expected = brute_force_midpoint(z, real.means)
        assert np.abs(draws - expected).max() < 1e-12
    report("calibration oracle (composed path)")


# ---------------------------------------------------------------------------
# Moment convergence
# ---------------------------------------------------------------------------

def test_moment_convergence():
    d, n = 8, 100_000
    rng = np.random.default_rng(5)
    a = rng.standard_normal((d, d)) / np.sqrt(d)
    cov = a @ a.T + 0.3 * np.eye(d)
    mean = rng.standard_normal(d)
    dist = CalibratedGaussian(mean, cov, label=0)
    factor = cholesky_psd(cov)
    target = cov + factor.jitter_used * np.eye(d)
    draws = sample_gaussian(dist, n, stream=(99,))
    mean_err = np.linalg.norm(draws.mean(axis=0) - mean)
    assert mean_err < 4.0 * np.sqrt(np.trace(cov) / n)
    sample_cov = np.cov(draws.T)
    rel = np.linalg.norm(sample_cov - target) / np.linalg.norm(target)
    assert rel < 0.05
    report("moment convergence")


# ---------------------------------------------------------------------------
# Gradient correctness
# ---------------------------------------------------------------------------

def fd_loss(clf, feats, labels):
    return softmax_ce_loss(logits(clf, feats), labels)[0]


def test_gradient_correctness():
    """Analytic vs central differences, 100 random instances, both heads."""
    rng = np.random.default_rng(17)
    eps = 1e-6
    for trial in range(100):
        kind = "linear" if trial % 2 == 0 else "cosine"
        k = int(rng.integers(2, 6))
        d = int(rng.integers(2, 9))
        n = int(rng.integers(2, 17))
        clf = init_classifier(k, d, kind, seed=trial, init_scale=4.0)
        feats = rng.standard_normal((n, d))
        labels = rng.integers(0, k, size=n)
        _, a_w, a_b, a_g = loss_and_grads(clf, feats, labels=labels)

        f_w = np.zeros_like(clf.weights)
        for idx in np.ndindex(*clf.weights.shape):
            hi, lo = clf.copy(), clf.copy()
            hi.weights[idx] += eps
            lo.weights[idx] -= eps
            f_w[idx] = (fd_loss(hi, feats, labels) - fd_loss(lo, feats, labels)) / (2 * eps)
        assert np.linalg.norm(a_w - f_w) / max(np.linalg.norm(f_w), 1e-12) < 1e-5

        if kind == "linear":
            f_b = np.zeros_like(clf.bias)
            for i in range(k):
                hi, lo = clf.copy(), clf.copy()
                hi.bias[i] += eps
                lo.bias[i] -= eps
                f_b[i] = (fd_loss(hi, feats, labels) - fd_loss(lo, feats, labels)) / (2 * eps)
            assert np.linalg.norm(a_b - f_b) / max(np.linalg.norm(f_b), 1e-12) < 1e-5
        else:
            hi, lo = clf.copy(), clf.copy()
            hi.gamma_raw += eps
            lo.gamma_raw -= eps
            f_g = (fd_loss(hi, feats, labels) - fd_loss(lo, feats, labels)) / (2 * eps)
            assert abs(a_g - f_g) / max(abs(f_g), 1e-12) < 1e-5
    report("gradient correctness")


# ---------------------------------------------------------------------------
# Cosine bound and scale invariance
# ---------------------------------------------------------------------------

def test_cosine_bound_and_scale_invariance():
    rng = np.random.default_rng(23)
    for trial in range(20):
        k = int(rng.integers(2, 8))
        d = int(rng.integers(2, 12))
        clf = init_classifier(k, d, "cosine", seed=trial)
        z = rng.standard_normal((30, d))
        scores = logits(clf, z)
        gamma = clf.scale
        assert (scores >= -gamma).all() and (scores <= gamma).all()
        for c in (1e-8, 0.37, 42.0, 1e8):
            assert np.abs(logits(clf, c * z) - scores).max() < 1e-9
    report("cosine bound and scale invariance")


# ---------------------------------------------------------------------------
# Desk-scale efficacy
# ---------------------------------------------------------------------------

# Margins measured by the pilot run on this seeded world, pinned as a
# regression bound at +/- 2 percentage points.
PILOT_TAILCALIB_FEW = 0.8566666666666667
PILOT_MARGIN_VS_PLAIN = 0.8566666666666667
PILOT_MARGIN_VS_OVERSAMPLE = 0.05666666666666664
PINNED_BAND = 0.02


def desk_world(seed=7):
    angles = np.deg2rad([0.0, 140.0, 55.0])
    means = 1.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.stack([0.45 ** 2 * np.eye(2), 0.45 ** 2 * np.eye(2),
                     0.6 ** 2 * np.eye(2)])
    train = synth_gaussian_dataset(
        SyntheticWorldSpec(means, covs, [500, 50, 5], seed=seed))
    val = synth_gaussian_dataset(
        SyntheticWorldSpec(means, covs, [300, 300, 300], seed=seed + 1000))
    return train, val


def desk_tail_accuracy(mode, train, val, seed=7):
    gen = GenerationConfig(tukey_lambda=1.0, n_neighbors=1, spread=0.0,
                           normalize=True, seed=seed)
    cfg = TrainConfig(epochs=60, batch_size=128, learning_rate=0.2,
                      momentum=0.9, weight_decay=5e-5, seed=seed, mode=mode,
                      generation=gen, classifier_kind="cosine", init_scale=4.0)
    clf, _ = train_classifier(epoch_provider(train, cfg), None, cfg)
    profile = ClassProfile(np.bincount(train.labels, minlength=3))
    return evaluate(clf, val, profile, thresholds=(100, 20)).few_accuracy


def test_desk_scale_efficacy():
    start = time.time()
    train, val = desk_world()
    plain = desk_tail_accuracy("plain", train, val)
    oversample = desk_tail_accuracy("oversample", train, val)
    tailcalib = desk_tail_accuracy("tailcalib", train, val)
    elapsed = time.time() - start

    assert tailcalib > plain, f"tailcalib {tailcalib} vs plain {plain}"
    assert tailcalib > oversample, f"tailcalib {tailcalib} vs oversample {oversample}"
    assert abs((tailcalib - plain) - PILOT_MARGIN_VS_PLAIN) <= PINNED_BAND
    assert abs((tailcalib - oversample) - PILOT_MARGIN_VS_OVERSAMPLE) <= PINNED_BAND
    assert abs(tailcalib - PILOT_TAILCALIB_FEW) <= PINNED_BAND
    assert elapsed < 30.0
    report(f"desk-scale efficacy (tail: plain={plain:.3f} "
           f"oversample={oversample:.3f} tailcalib={tailcalib:.3f}, "
           f"{elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------

def _manifest_digest(outdir):
    return hashlib.sha256((outdir / "manifest.json").read_bytes()).hexdigest()


def test_pipeline_determinism(tmp_path):
    """Every CLI stage rerun with the same config/seed is byte-identical,
    regardless of --threads."""
    rng = np.random.default_rng(3)
    k, per_class, d = 5, 30, 4
    means = rng.uniform(2.0, 8.0, (k, d))
    covs = np.stack([0.25 * np.eye(d)] * k)
    world = synth_gaussian_dataset(
        SyntheticWorldSpec(means, covs, [per_class] * k, seed=3))
    world_path = tmp_path / "world.tcfb"
    write_feature_file(world, world_path)
    val_path = tmp_path / "val.tcfb"
    write_feature_file(synth_gaussian_dataset(
        SyntheticWorldSpec(means, covs, [10] * k, seed=55)), val_path)

    digests = []
    for run, threads in (("r1", "1"), ("r2", "6")):
        base = tmp_path / run
        t = ["--threads", threads]
        assert main(["subsample", "--input", str(world_path), "--imbalance", "5",
                     "--seed", "2", "--output", str(base / "sub")] + t) == 0
        sub_file = str(base / "sub" / "subsampled.tcfb")
        assert main(["generate", "--input", sub_file, "--neighbors", "2",
                     "--seed", "2", "--output", str(base / "gen")] + t) == 0
        assert main(["train", "--input", sub_file, "--val", str(val_path),
                     "--mode", "tailcalibx", "--classifier", "cosine",
                     "--epochs", "2", "--neighbors", "2", "--lr", "0.05",
                     "--seed", "2", "--output", str(base / "train")] + t) == 0
        assert main(["eval", "--checkpoint", str(base / "train" / "classifier.ckpt"),
                     "--val", str(val_path), "--train", sub_file,
                     "--output", str(base / "eval")] + t) == 0
        assert main(["nn-report", "--input", sub_file, "--bottom", "2",
                     "--neighbors", "2", "--output", str(base / "nn")] + t) == 0
        assert main(["project", "--input", sub_file, "--dims", "2",
                     "--output", str(base / "proj")] + t) == 0
        digests.append({stage: _manifest_digest(base / stage)
                        for stage in ("sub", "gen", "train", "eval", "nn", "proj")})
    assert digests[0] == digests[1]
    report("determinism across reruns and --threads")


# ---------------------------------------------------------------------------
# Tukey identity
# ---------------------------------------------------------------------------

def test_tukey_identity():
    """The lambda=1 generation path is bitwise-equal to the no-transform path."""
    x = np.random.default_rng(41).standard_normal((12, 5))
    assert np.array_equal(tukey_transform(x, 1.0), x)

    rng = np.random.default_rng(43)
    means = rng.uniform(2.0, 8.0, (4, 3))
    covs = np.stack([0.3 * np.eye(3)] * 4)
    ds = synth_gaussian_dataset(
        SyntheticWorldSpec(means, covs, [40, 12, 5, 2], seed=43))
    with_transform = generate_balanced(
        ds, GenerationConfig(tukey_lambda=1.0, n_neighbors=2, seed=6))
    without = generate_balanced(
        ds, GenerationConfig(tukey_lambda=None, n_neighbors=2, seed=6))
    assert np.array_equal(with_transform.features, without.features)
    assert np.array_equal(with_transform.labels, without.labels)
    report("tukey identity")
