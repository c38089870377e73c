"""Reference rebalancing strategies: duplication, noisy duplication, mixup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .store import FeatureDataset

BASELINE_KINDS = ("oversample", "gaussian_noise", "feature_mixup")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    noise_scale: float = 0.0
    mixup_alpha: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValidationError(f"kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        if self.mixup_alpha <= 0:
            raise ValidationError("mixup_alpha must be > 0")


def _pad_balance(dataset: FeatureDataset, target_count: int, seed: int,
                 noise_scale: float) -> FeatureDataset:
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValidationError(f"classes {empty} are empty and cannot be padded")
    if target_count < counts.max():
        raise ValidationError(
            f"target_count {target_count} is below the largest class ({int(counts.max())})"
        )
    feats = dataset.features
    blocks = [feats]
    labels = [np.asarray(dataset.labels)]
    for k in range(dataset.num_classes):
        extra = target_count - int(counts[k])
        if extra == 0:
            continue
        rows = dataset.class_indices(k)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        picks = rng.integers(0, rows.size, size=extra)
        pad = feats[rows[picks]]
        if noise_scale > 0:
            noise = rng.standard_normal((extra, dataset.dim)) * noise_scale
            pad = pad + noise.astype(feats.dtype)
        else:
            pad = pad.copy()
        blocks.append(pad)
        labels.append(np.full(extra, k, dtype=np.int64))
    return FeatureDataset(np.concatenate(blocks), np.concatenate(labels),
                          dataset.num_classes)


def oversample_balance(dataset: FeatureDataset, target_count: int,
                       seed: int) -> FeatureDataset:
    """Pad every class to target_count by resampling existing rows with
    replacement. The originals come first, padding rows after, per class."""
    return _pad_balance(dataset, target_count, seed, noise_scale=0.0)


def gaussian_noise_balance(dataset: FeatureDataset, target_count: int,
                           noise_scale: float, seed: int) -> FeatureDataset:
    """Like oversample_balance but each padding row gets isotropic Gaussian
    noise of the given scale added. noise_scale 0 is bitwise-identical to
    plain oversampling (same selection stream)."""
    if noise_scale < 0:
        raise ValidationError("noise_scale must be >= 0")
    return _pad_balance(dataset, target_count, seed, noise_scale=noise_scale)


def feature_mixup_batch(features: np.ndarray, labels_onehot: np.ndarray,
                        mixup_alpha: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of a batch with a seeded permutation of itself.

    A single mixing weight w ~ Beta(alpha, alpha) is drawn per call; both the
    features and the one-hot labels are mixed with the same weight.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels_onehot, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValidationError("batch must be nonempty")
    if y.shape[0] != x.shape[0]:
        raise ValidationError("features and labels disagree on batch size")
    if mixup_alpha <= 0:
        raise ValidationError("mixup_alpha must be > 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    perm = rng.permutation(x.shape[0])
    w = rng.beta(mixup_alpha, mixup_alpha)
    mixed_x = w * x + (1.0 - w) * x[perm]
    mixed_y = w * y + (1.0 - w) * y[perm]
    return mixed_x, mixed_y
