"""Accuracy breakdowns, neighbor-frequency reports, and PCA projections."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .calibrate import GenerationConfig, nearest_class_means
from .classifier import Classifier, logits
from .errors import ValidationError
from .store import ClassProfile, FeatureDataset
from .transform import ClassStats, l2_normalize, tukey_transform

# Class-count thresholds for the many/mid/few split: a class is "many" when
# its training count exceeds many_min and "few" when it falls below few_max.
DEFAULT_THRESHOLDS = (100, 20)


@dataclass(frozen=True)
class Metrics:
    overall_accuracy: float
    per_class_accuracy: np.ndarray
    many_accuracy: float
    mid_accuracy: float
    few_accuracy: float
    split_thresholds: tuple[int, int]
    class_groups: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": [float(a) for a in self.per_class_accuracy],
            "many_accuracy": self.many_accuracy,
            "mid_accuracy": self.mid_accuracy,
            "few_accuracy": self.few_accuracy,
            "split_thresholds": {
                "many_min": self.split_thresholds[0],
                "few_max": self.split_thresholds[1],
            },
            "class_groups": list(self.class_groups),
        }


def assign_groups(train_counts: np.ndarray,
                  thresholds: tuple[int, int] = DEFAULT_THRESHOLDS) -> tuple[str, ...]:
    many_min, few_max = thresholds
    groups = []
    for c in train_counts:
        if c > many_min:
            groups.append("many")
        elif c < few_max:
            groups.append("few")
        else:
            groups.append("mid")
    return tuple(groups)


def evaluate(classifier: Classifier, val: FeatureDataset,
             train_profile: ClassProfile,
             thresholds: tuple[int, int] = DEFAULT_THRESHOLDS) -> Metrics:
    """Argmax accuracy overall, per class, and per many/mid/few group.

    Groups are decided by the *training* counts; group accuracies are
    sample-weighted over the validation rows of their classes. A group with
    no classes reports NaN.
    """
    if train_profile.num_classes != val.num_classes:
        raise ValidationError(
            f"label spaces disagree: profile has {train_profile.num_classes} classes, "
            f"validation set has {val.num_classes}"
        )
    preds = logits(classifier, val.features).argmax(axis=1)
    correct = preds == val.labels
    k = val.num_classes
    val_counts = np.bincount(val.labels, minlength=k)
    correct_counts = np.bincount(val.labels[correct], minlength=k)
    with np.errstate(invalid="ignore"):
        per_class = np.where(val_counts > 0, correct_counts / np.maximum(val_counts, 1), np.nan)

    groups = assign_groups(np.asarray(train_profile.counts), thresholds)
    group_acc = {}
    for name in ("many", "mid", "few"):
        members = [c for c in range(k) if groups[c] == name]
        total = int(val_counts[members].sum()) if members else 0
        group_acc[name] = (float(correct_counts[members].sum() / total)
                           if total else float("nan"))
    return Metrics(
        overall_accuracy=float(correct.mean()),
        per_class_accuracy=per_class,
        many_accuracy=group_acc["many"],
        mid_accuracy=group_acc["mid"],
        few_accuracy=group_acc["few"],
        split_thresholds=tuple(thresholds),
        class_groups=groups,
    )


def nn_report(stats: ClassStats, dataset: FeatureDataset,
              config: GenerationConfig, bottom_n: int) -> list[dict]:
    """Neighbor-frequency table for the bottom_n smallest classes.

    Every instance of a tail class contributes its selected neighbor set, so
    raw counts per class sum to N_k * n_neighbors. The ranked table excludes
    the class's own id (kept separately as own_selections).
    """
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if (counts == 0).any():
        raise ValidationError("neighbor report needs every class populated")
    if not (1 <= bottom_n <= dataset.num_classes):
        raise ValidationError(f"bottom_n must be in [1, {dataset.num_classes}]")

    feats = np.asarray(dataset.features, dtype=np.float64)
    if config.normalize:
        feats = l2_normalize(feats)
    if config.tukey_lambda is not None:
        feats = tukey_transform(feats, config.tukey_lambda, signed=config.signed_power)

    order = sorted(range(dataset.num_classes), key=lambda c: (counts[c], c))
    tail = order[:bottom_n]
    rows = []
    for t in tail:
        histogram = np.zeros(dataset.num_classes, dtype=np.int64)
        for idx in dataset.class_indices(t):
            histogram[nearest_class_means(feats[idx], stats, config.n_neighbors)] += 1
        ranked = sorted(
            ((int(c), int(histogram[c])) for c in range(dataset.num_classes)
             if c != t and histogram[c] > 0),
            key=lambda item: (-item[1], item[0]),
        )
        rows.append({
            "class_id": int(t),
            "train_count": int(counts[t]),
            "own_selections": int(histogram[t]),
            "neighbor_counts": [int(v) for v in histogram],
            "top_neighbors": ranked,
        })
    return rows


def pca_project(features: np.ndarray, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Centered PCA via eigendecomposition of the covariance.

    Components come in descending eigenvalue order, each with its largest-
    magnitude loading made positive; explained-variance ratios are relative to
    the total variance. If the data has rank below dims, fewer components are
    returned with a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("features must be a matrix")
    n, d = x.shape
    if n < dims:
        raise ValidationError(f"need at least dims={dims} rows, got {n}")
    if dims < 1:
        raise ValidationError("dims must be >= 1")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh((cov + cov.T) / 2.0)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    total = float(np.clip(eigvals, 0.0, None).sum())
    rank = int((eigvals > max(total, 1e-300) * 1e-12).sum())
    keep = min(dims, rank)
    if keep < dims:
        warnings.warn(
            f"data rank {rank} is below the requested {dims} dimensions; "
            f"returning {keep} component(s)",
            stacklevel=2,
        )
    components = eigvecs[:, :keep]
    for j in range(keep):
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    projected = centered @ components
    ratios = (eigvals[:keep] / total) if total > 0 else np.zeros(keep)
    return projected, ratios
