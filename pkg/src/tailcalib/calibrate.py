"""Calibrated per-instance Gaussians and balanced feature generation.

The generation pipeline: optionally row-normalize, apply the power-ladder
transform, estimate per-class statistics in the transformed space, then for
every quota-carrying instance build a Gaussian whose mean averages the
instance with its nearest class centroids and whose covariance averages the
neighbor covariances (plus an optional spread constant), and sample from it.
Each class ends up with exactly target_count features (original + generated).

Per-instance RNG streams are keyed by (seed, class id, row index), so the
generated set is identical no matter how the work is scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ValidationError
from .sampler import DEFAULT_MAX_JITTER, derive_seed, sample_gaussian
from .store import FeatureDataset
from .transform import ClassStats, TukeyParam, class_statistics, l2_normalize, tukey_transform


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs of the generation pipeline.

    tukey_lambda: power-ladder exponent; None disables the transform entirely
        (the lambda=1 path is bitwise-identical to None).
    n_neighbors: how many nearest class centroids calibrate each instance;
        the instance's own class is a candidate.
    spread: constant added to every covariance entry of the calibrated
        Gaussian (or to the diagonal only, with diagonal_spread).
    normalize: row-normalize features before the pipeline and the generated
        features after it.
    target_count: per-class total after generation; defaults to the largest
        class count.
    """

    tukey_lambda: Optional[float] = 1.0
    n_neighbors: int = 3
    spread: float = 0.0
    normalize: bool = True
    seed: int = 0
    target_count: Optional[int] = None
    signed_power: bool = False
    raw_statistics: bool = False
    diagonal_spread: bool = False
    max_jitter: float = DEFAULT_MAX_JITTER

    def __post_init__(self):
        if self.tukey_lambda is not None:
            TukeyParam(self.tukey_lambda)  # validates
        if self.n_neighbors < 1:
            raise ValidationError("n_neighbors must be >= 1")
        if not np.isfinite(self.spread) or self.spread < 0:
            raise ValidationError("spread must be finite and >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be an unsigned integer")
        if self.target_count is not None and self.target_count < 1:
            raise ValidationError("target_count must be >= 1 when set")
        if self.max_jitter < 0:
            raise ValidationError("max_jitter must be >= 0")

    def to_dict(self) -> dict:
        return {
            "tukey_lambda": self.tukey_lambda,
            "n_neighbors": self.n_neighbors,
            "spread": self.spread,
            "normalize": self.normalize,
            "seed": self.seed,
            "target_count": self.target_count,
            "signed_power": self.signed_power,
            "raw_statistics": self.raw_statistics,
            "diagonal_spread": self.diagonal_spread,
            "max_jitter": self.max_jitter,
        }


@dataclass(frozen=True)
class CalibratedGaussian:
    """Instance-specific Gaussian: averaged neighbor means/covariances."""

    mean: np.ndarray
    covariance: np.ndarray
    label: int
    source_index: int = -1


@dataclass(frozen=True)
class QuotaPlan:
    """Who generates how much: per class, (within-class row position, draws).

    Within each class the draw counts sum to target_count - N_k exactly and
    no position appears twice.
    """

    target_count: int
    assignments: dict[int, tuple[tuple[int, int], ...]]

    def total(self, class_id: int) -> int:
        return sum(n for _, n in self.assignments.get(class_id, ()))


def nearest_class_means(z_tilde: np.ndarray, stats: ClassStats,
                        n_neighbors: int) -> list[int]:
    """Class ids of the n_neighbors centroids closest to z_tilde (Euclidean).

    Ties break toward the lower class id. The instance's own class competes
    like any other.
    """
    if n_neighbors > stats.num_classes:
        raise ValidationError(
            f"n_neighbors={n_neighbors} exceeds the {stats.num_classes} available classes"
        )
    z = np.asarray(z_tilde, dtype=np.float64)
    diffs = stats.means - z
    dist = np.sqrt((diffs * diffs).sum(axis=1))
    order = np.argsort(dist, kind="stable")  # stable => ascending id on ties
    return [int(c) for c in order[:n_neighbors]]


def calibrated_distribution(z_tilde: np.ndarray, neighbors: list[int],
                            stats: ClassStats, spread: float, label: int,
                            source_index: int = -1,
                            diagonal_spread: bool = False) -> CalibratedGaussian:
    """Equal-weight average of neighbor means and the instance; averaged
    neighbor covariances with the spread constant added to every entry
    (or only the diagonal when diagonal_spread is set)."""
    if not neighbors:
        raise ValidationError("neighbor list must be nonempty")
    z = np.asarray(z_tilde, dtype=np.float64)
    idx = np.asarray(neighbors, dtype=np.int64)
    mean = (stats.means[idx].sum(axis=0) + z) / (len(neighbors) + 1)
    cov = stats.covariances[idx].mean(axis=0)
    if diagonal_spread:
        cov = cov + spread * np.eye(cov.shape[0])
    else:
        cov = cov + spread
    return CalibratedGaussian(mean, cov, int(label), int(source_index))


def generation_quotas(counts: np.ndarray, target_count: int,
                      seed: int) -> QuotaPlan:
    """Assign per-instance draw counts so each class gains target - N_k rows.

    The base quota is ceil(target/N_k - 1) per carrying instance; enough
    instances are chosen uniformly without replacement to cover the deficit,
    with one extra instance absorbing the remainder. Deterministic given seed.
    """
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValidationError("counts must be a nonempty vector")
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValidationError(f"classes {empty} are empty; nothing can generate for them")
    if target_count < counts.max():
        raise ValidationError(
            f"target_count {target_count} is below the largest class ({int(counts.max())})"
        )
    assignments: dict[int, tuple[tuple[int, int], ...]] = {}
    for k in range(counts.size):
        n_k = int(counts[k])
        deficit = target_count - n_k
        if deficit == 0:
            assignments[k] = ()
            continue
        quota = (target_count - 1) // n_k  # == ceil(target/N_k - 1)
        full, remainder = divmod(deficit, quota)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        chosen = rng.choice(n_k, size=full + (1 if remainder else 0), replace=False)
        plan = [(int(i), quota) for i in chosen[:full]]
        if remainder:
            plan.append((int(chosen[full]), remainder))
        assignments[k] = tuple(sorted(plan))
    return QuotaPlan(target_count, assignments)


@dataclass(frozen=True)
class GenerationOutcome:
    """Generated features plus the bookkeeping the JSON report is built from."""

    generated: FeatureDataset
    stats: ClassStats
    plan: QuotaPlan
    neighbor_histogram: np.ndarray  # (K, K): [class, chosen neighbor] counts
    config: GenerationConfig

    def report(self) -> dict:
        counts = np.bincount(self.generated.labels,
                             minlength=self.generated.num_classes)
        per_class = {
            str(k): {
                "original": int(self.stats.counts[k]),
                "generated": int(counts[k]),
            }
            for k in range(self.generated.num_classes)
        }
        histograms = {
            str(k): {str(j): int(v) for j, v in enumerate(self.neighbor_histogram[k]) if v}
            for k in range(self.generated.num_classes)
        }
        return {
            "target_count": self.plan.target_count,
            "per_class": per_class,
            "neighbor_histograms": histograms,
            "config": self.config.to_dict(),
        }


def pipeline_features(dataset: FeatureDataset,
                       config: GenerationConfig) -> tuple[np.ndarray, np.ndarray]:
    """(base, transformed) feature matrices in float64 pipeline space."""
    base = np.asarray(dataset.features, dtype=np.float64)
    if config.normalize:
        base = l2_normalize(base)
    if config.tukey_lambda is None:
        transformed = base.copy()
    else:
        transformed = tukey_transform(base, config.tukey_lambda,
                                      signed=config.signed_power)
    return base, transformed


def run_generation(dataset: FeatureDataset,
                   config: GenerationConfig) -> GenerationOutcome:
    """Full generation pipeline; see the module docstring for the stages."""
    if dataset.n == 0:
        raise ValidationError("cannot generate from an empty dataset")
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValidationError(f"classes {empty} are empty; calibration needs every class populated")
    target = config.target_count if config.target_count is not None else int(counts.max())
    if config.n_neighbors > dataset.num_classes:
        raise ValidationError(
            f"n_neighbors={config.n_neighbors} exceeds the {dataset.num_classes} classes present"
        )

    base, transformed = pipeline_features(dataset, config)
    stats_space = base if config.raw_statistics else transformed
    stats = class_statistics(
        FeatureDataset(stats_space, dataset.labels, dataset.num_classes))
    plan = generation_quotas(counts, target, config.seed)

    histogram = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    blocks: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for k in range(dataset.num_classes):
        rows = dataset.class_indices(k)
        for local_idx, n_draw in plan.assignments.get(k, ()):
            row = int(rows[local_idx])
            z = transformed[row]
            neighbors = nearest_class_means(z, stats, config.n_neighbors)
            histogram[k, neighbors] += 1
            dist = calibrated_distribution(
                z, neighbors, stats, config.spread, label=k, source_index=row,
                diagonal_spread=config.diagonal_spread)
            draws = sample_gaussian(dist, n_draw,
                                    stream=(config.seed, k, row),
                                    max_jitter=config.max_jitter)
            blocks.append(draws)
            labels.append(np.full(n_draw, k, dtype=np.int64))

    if blocks:
        generated = np.concatenate(blocks)
        gen_labels = np.concatenate(labels)
    else:
        generated = np.empty((0, dataset.dim), dtype=np.float64)
        gen_labels = np.empty(0, dtype=np.int64)
    if config.normalize and generated.shape[0]:
        generated = l2_normalize(generated)
    out = FeatureDataset(generated, gen_labels, dataset.num_classes)
    return GenerationOutcome(out, stats, plan, histogram, config)


def generate_balanced(dataset: FeatureDataset,
                      config: GenerationConfig) -> FeatureDataset:
    """Generated features only (labels included); one call of the pipeline."""
    return run_generation(dataset, config).generated


def epoch_config(config: GenerationConfig, epoch: int) -> GenerationConfig:
    """Config for a fresh per-epoch generation round (new derived seed)."""
    return replace(config, seed=derive_seed(config.seed, 0x45504F43, epoch))
