"""Labeled feature datasets: on-disk format, long-tail profiles, synthetic worlds.

The TCFB binary layout (little-endian) is the interchange format of the whole
toolkit:

    magic   4 bytes  b"TCFB"
    version u32      currently 1
    N       u64      number of rows
    D       u32      feature dimension
    K       u32      number of classes
    payload          N*D float32 features, row-major, then N uint32 labels

Features are float32 on disk; everything statistical elsewhere in the package
runs in float64. Optional sidecar metadata (label maps, synthetic-row markers,
rounding modes) lives in a JSON file next to the TCFB file, never inside it.
"""
from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

TCFB_MAGIC = b"TCFB"
TCFB_VERSION = 1
_HEADER = struct.Struct("<4sIQII")  # magic, version, N, D, K


def _readonly(a: np.ndarray) -> np.ndarray:
    view = a.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class FeatureDataset:
    """N x D feature matrix with integer class labels in [0, num_classes).

    Immutable after construction; the arrays are held as read-only views and
    the dataset is safe to share across threads.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValidationError(f"features must be 2-d, got shape {feats.shape}")
        if feats.shape[1] < 1:
            raise ValidationError("feature dimension must be >= 1")
        if labels.ndim != 1:
            raise ValidationError(f"labels must be 1-d, got shape {labels.shape}")
        if feats.shape[0] != labels.shape[0]:
            raise ValidationError(
                f"row count mismatch: {feats.shape[0]} feature rows, {labels.shape[0]} labels"
            )
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if not np.isfinite(feats).all():
            bad = np.argwhere(~np.isfinite(feats))[0]
            raise ValidationError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
        if labels.size:
            lo, hi = int(labels.min()), int(labels.max())
            if lo < 0 or hi >= self.num_classes:
                offender = hi if hi >= self.num_classes else lo
                raise ValidationError(
                    f"label {offender} outside [0, {self.num_classes})"
                )
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_indices(self, k: int) -> np.ndarray:
        """Row indices of class *k*, in dataset order."""
        return np.flatnonzero(self.labels == k)


@dataclass(frozen=True)
class ClassProfile:
    """Per-class sample counts plus the head/tail summary derived from them."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValidationError("counts must be a nonempty 1-d integer vector")
        if (counts < 0).any():
            raise ValidationError("counts must be nonnegative")
        object.__setattr__(self, "counts", _readonly(counts))

    @property
    def num_classes(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty_classes(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.counts == 0))

    @property
    def head_count(self) -> int:
        return int(self.counts.max())

    @property
    def tail_count(self) -> int:
        """Smallest nonzero class count (empty classes are excluded)."""
        nonzero = self.counts[self.counts > 0]
        if nonzero.size == 0:
            raise ValidationError("profile has no populated class")
        return int(nonzero.min())

    @property
    def imbalance_factor(self) -> float:
        return self.head_count / self.tail_count

    def sorted_counts(self) -> np.ndarray:
        """Counts in descending order (the conventional long-tail view)."""
        return np.sort(self.counts)[::-1]

    def to_dict(self) -> dict:
        return {
            "counts": [int(c) for c in self.counts],
            "head_count": self.head_count,
            "tail_count": self.tail_count,
            "imbalance_factor": self.imbalance_factor,
            "empty_classes": list(self.empty_classes),
        }


@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Ground-truth Gaussian mixture used to synthesize oracle datasets."""

    class_means: np.ndarray
    class_covariances: np.ndarray
    counts: np.ndarray
    seed: int = 0

    def __post_init__(self):
        means = np.ascontiguousarray(self.class_means, dtype=np.float64)
        covs = np.ascontiguousarray(self.class_covariances, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if means.ndim != 2:
            raise ValidationError("class_means must be K x D")
        k, d = means.shape
        if covs.shape != (k, d, d):
            raise ValidationError(f"class_covariances must have shape ({k}, {d}, {d})")
        if counts.shape != (k,):
            raise ValidationError(f"counts must have shape ({k},)")
        if (counts < 1).any():
            raise ValidationError("every synthetic class needs at least one sample")
        for idx in range(k):
            c = covs[idx]
            if np.abs(c - c.T).max() > 1e-9:
                raise ValidationError(f"covariance {idx} is not symmetric")
            w = np.linalg.eigvalsh((c + c.T) / 2.0)
            if w.min() < -1e-8 * max(1.0, abs(w.max())):
                raise ValidationError(
                    f"covariance {idx} is not PSD (smallest eigenvalue {w.min():.3e})"
                )
        object.__setattr__(self, "class_means", _readonly(means))
        object.__setattr__(self, "class_covariances", _readonly(covs))
        object.__setattr__(self, "counts", _readonly(counts))

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


# ---------------------------------------------------------------------------
# TCFB read/write
# ---------------------------------------------------------------------------

def write_feature_file(dataset: FeatureDataset, path: str | Path,
                       metadata: dict | None = None) -> None:
    """Write *dataset* to *path* in TCFB format.

    Features are stored as float32; float64 inputs are narrowed (lossy).
    When *metadata* is given it is written as sorted-key JSON to the
    ``<path>.meta.json`` sidecar.
    """
    path = Path(path)
    header = _HEADER.pack(TCFB_MAGIC, TCFB_VERSION, dataset.n, dataset.dim,
                          dataset.num_classes)
    feats = np.ascontiguousarray(dataset.features, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())
    if metadata is not None:
        sidecar_path(path).write_text(
            json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def read_feature_file(path: str | Path) -> FeatureDataset:
    """Read a TCFB file, validating magic, version, lengths, and labels."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != TCFB_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {TCFB_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header ({len(data)} bytes)")
    _, version, n, d, k = _HEADER.unpack_from(data)
    if version != TCFB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + n * d * 4 + n * 4
    if len(data) < expected:
        raise CorruptionError(
            f"{path}: truncated payload ({len(data)} bytes, header implies {expected})"
        )
    if len(data) > expected:
        raise CorruptionError(
            f"{path}: {len(data) - expected} trailing bytes beyond declared payload"
        )
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=_HEADER.size + n * d * 4)
    return FeatureDataset(feats.reshape(n, d), labels.astype(np.int64), k)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_sidecar(path: str | Path) -> dict | None:
    """Metadata written next to a TCFB file, or None if there is none."""
    side = sidecar_path(path)
    if not side.exists():
        return None
    return json.loads(side.read_text())


def read_feature_csv(path: str | Path) -> tuple[FeatureDataset, dict]:
    """Import a ``f0,...,f{D-1},label`` CSV.

    Arbitrary label alphabets are remapped to contiguous ids 0..K-1; the
    returned dict maps original label -> id and belongs in a sidecar JSON.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty CSV")
        d = len(header) - 1
        expected_header = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or header != expected_header:
            raise FormatError(
                f"{path}: header must be f0,...,f{{D-1}},label, got {header!r}"
            )
        rows: list[list[float]] = []
        raw_labels: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise CorruptionError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:d]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            raw_labels.append(row[d])
    try:
        ordered = sorted(set(raw_labels), key=int)
    except ValueError:
        ordered = sorted(set(raw_labels))
    label_map = {orig: idx for idx, orig in enumerate(ordered)}
    feats = np.asarray(rows, dtype=np.float32).reshape(len(rows), d)
    labels = np.asarray([label_map[v] for v in raw_labels], dtype=np.int64)
    return FeatureDataset(feats, labels, len(ordered)), label_map


# ---------------------------------------------------------------------------
# Long-tail construction
# ---------------------------------------------------------------------------

def class_profile(dataset: FeatureDataset) -> ClassProfile:
    """Count samples per class; empty classes are flagged with a warning."""
    if dataset.n == 0:
        raise ValidationError("cannot profile an empty dataset")
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    profile = ClassProfile(counts)
    if profile.empty_classes:
        warnings.warn(
            f"classes {list(profile.empty_classes)} have no samples; "
            "imbalance factor computed over nonzero classes",
            stacklevel=2,
        )
    return profile


def _round(x: float, mode: str) -> int:
    if mode == "half-up":
        return int(math.floor(x + 0.5))
    if mode == "floor":
        return int(math.floor(x))
    if mode == "ceil":
        return int(math.ceil(x))
    raise ValidationError(f"unknown rounding mode {mode!r}")


def make_longtail_counts(n_head: int, num_classes: int, imbalance_factor: float,
                         rounding: str = "half-up") -> np.ndarray:
    """Exponentially decaying per-class counts from n_head down to n_head/IF.

    counts[k] = round(n_head * IF**(-k/(K-1))), clamped to >= 1. The first
    entry is exactly n_head and the last rounds n_head/IF.
    """
    if n_head < 1:
        raise ValidationError("n_head must be >= 1")
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    if imbalance_factor < 1:
        raise ValidationError("imbalance_factor must be >= 1")
    counts = np.empty(num_classes, dtype=np.int64)
    for k in range(num_classes):
        decay = imbalance_factor ** (-k / (num_classes - 1))
        counts[k] = max(1, _round(n_head * decay, rounding))
    counts[0] = n_head
    return counts


def subsample_longtail(dataset: FeatureDataset, counts: np.ndarray,
                       seed: int) -> FeatureDataset:
    """Keep counts[k] rows of each class, chosen uniformly without replacement.

    Deterministic given *seed*; surviving rows keep their original order.
    """
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    if counts.shape != (dataset.num_classes,):
        raise ValidationError(
            f"counts must have length {dataset.num_classes}, got {counts.shape}"
        )
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for k in range(dataset.num_classes):
        idx = dataset.class_indices(k)
        if counts[k] > idx.size:
            raise ValidationError(
                f"class {k}: requested {int(counts[k])} samples but only {idx.size} available"
            )
        keep.append(rng.choice(idx, size=int(counts[k]), replace=False))
    order = np.sort(np.concatenate(keep)) if keep else np.empty(0, dtype=np.int64)
    return FeatureDataset(dataset.features[order], dataset.labels[order],
                          dataset.num_classes)


def synth_gaussian_dataset(spec: SyntheticWorldSpec) -> FeatureDataset:
    """Draw counts[k] samples from each class Gaussian. Deterministic given seed.

    A zero covariance reproduces the class mean exactly (the factor used is an
    eigendecomposition square root, so no jitter is ever added here).
    """
    blocks: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for k in range(spec.num_classes):
        cov = (spec.class_covariances[k] + spec.class_covariances[k].T) / 2.0
        w, v = np.linalg.eigh(cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), k]))
        eps = rng.standard_normal((int(spec.counts[k]), spec.dim))
        blocks.append(spec.class_means[k] + eps @ root.T)
        labels.append(np.full(int(spec.counts[k]), k, dtype=np.int64))
    return FeatureDataset(np.concatenate(blocks), np.concatenate(labels),
                          spec.num_classes)
