"""Power-ladder transform, row normalization, and per-class Gaussian statistics.

All outputs are float64 regardless of input dtype; covariance estimation is
two-pass (mean, then deviations) because one-pass accumulation cancels badly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DomainError, FormatError, ValidationError
from .store import FeatureDataset

STATS_MAGIC = b"TCST"
STATS_VERSION = 1
_STATS_HEADER = struct.Struct("<4sIII")  # magic, version, K, D


@dataclass(frozen=True)
class ClassStats:
    """Per-class mean vectors, full covariance matrices, and sample counts."""

    means: np.ndarray        # (K, D) float64
    covariances: np.ndarray  # (K, D, D) float64
    counts: np.ndarray       # (K,) int64

    def __post_init__(self):
        means = np.ascontiguousarray(self.means, dtype=np.float64)
        covs = np.ascontiguousarray(self.covariances, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if means.ndim != 2:
            raise ValidationError("means must be K x D")
        k, d = means.shape
        if covs.shape != (k, d, d):
            raise ValidationError(f"covariances must have shape ({k}, {d}, {d})")
        if counts.shape != (k,):
            raise ValidationError(f"counts must have shape ({k},)")
        asym = np.abs(covs - np.transpose(covs, (0, 2, 1))).max() if k else 0.0
        if asym > 1e-9:
            raise ValidationError(f"covariance asymmetry {asym:.3e} exceeds 1e-9")
        for name, arr in (("means", means), ("covariances", covs)):
            if not np.isfinite(arr).all():
                raise ValidationError(f"non-finite entry in {name}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def smallest_eigenvalues(self) -> np.ndarray:
        """Smallest eigenvalue of each covariance (PSD check helper)."""
        return np.array([np.linalg.eigvalsh(c).min() for c in self.covariances])

    def to_json_file(self, path: str | Path) -> None:
        payload = {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "counts": [int(c) for c in self.counts],
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ClassStats":
        payload = json.loads(Path(path).read_text())
        return cls(np.asarray(payload["means"]), np.asarray(payload["covariances"]),
                   np.asarray(payload["counts"]))

    def to_binary_file(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_STATS_HEADER.pack(STATS_MAGIC, STATS_VERSION,
                                        self.num_classes, self.dim))
            fh.write(np.ascontiguousarray(self.counts, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.means, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.covariances, dtype="<f8").tobytes())

    @classmethod
    def from_binary_file(cls, path: str | Path) -> "ClassStats":
        data = Path(path).read_bytes()
        if data[:4] != STATS_MAGIC:
            raise FormatError(f"{path}: bad magic {data[:4]!r}")
        _, version, k, d = _STATS_HEADER.unpack_from(data)
        if version != STATS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        expected = _STATS_HEADER.size + k * 8 + k * d * 8 + k * d * d * 8
        if len(data) != expected:
            raise CorruptionError(f"{path}: {len(data)} bytes, header implies {expected}")
        off = _STATS_HEADER.size
        counts = np.frombuffer(data, dtype="<i8", count=k, offset=off)
        off += k * 8
        means = np.frombuffer(data, dtype="<f8", count=k * d, offset=off).reshape(k, d)
        off += k * d * 8
        covs = np.frombuffer(data, dtype="<f8", count=k * d * d, offset=off).reshape(k, d, d)
        return cls(means, covs, counts.astype(np.int64))


@dataclass(frozen=True)
class TukeyParam:
    """Exponent of the power-ladder transform; 1 is the identity, 0 means log."""

    value: float

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v) or v < 0:
            raise ValidationError(f"tukey lambda must be finite and >= 0, got {v}")
        object.__setattr__(self, "value", v)


def tukey_transform(features: np.ndarray, lam: float | TukeyParam, *,
                    signed: bool = False) -> np.ndarray:
    """Elementwise power-ladder transform: x**lam, or log(x) when lam == 0.

    lam == 1 returns the input unchanged (bitwise, for float64 inputs).
    In strict mode (default) negative entries with lam not in {0, 1} raise a
    DomainError naming the offending row and column; with signed=True the
    transform is sign(x) * |x|**lam instead.
    """
    lam = lam.value if isinstance(lam, TukeyParam) else TukeyParam(lam).value
    x = np.asarray(features, dtype=np.float64)
    if lam == 1.0:
        return x.copy()
    if lam == 0.0:
        if (x <= 0).any():
            loc = np.argwhere(x <= 0)[0]
            raise DomainError(
                f"log transform needs positive entries; offending index {tuple(int(i) for i in loc)}"
            )
        return np.log(x)
    if signed:
        return np.sign(x) * np.abs(x) ** lam
    if (x < 0).any():
        loc = np.argwhere(x < 0)[0]
        raise DomainError(
            f"negative entry at index {tuple(int(i) for i in loc)} with lambda={lam}; "
            "enable signed-power mode to transform signed features"
        )
    return x ** lam


def l2_normalize(features: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm (float64 output)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a matrix, got shape {x.shape}")
    norms = np.sqrt((x * x).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DomainError(f"row {int(zero[0])} has zero norm and cannot be normalized")
    return x / norms[:, None]


def class_statistics(dataset: FeatureDataset) -> ClassStats:
    """Per-class mean and unbiased covariance (divisor N_k - 1).

    Every class id in [0, num_classes) must have at least one sample; a
    singleton class gets the zero covariance matrix.
    """
    feats = np.asarray(dataset.features, dtype=np.float64)
    if not np.isfinite(feats).all():
        raise ValidationError("features contain non-finite values")
    k, d = dataset.num_classes, dataset.dim
    counts = np.bincount(dataset.labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValidationError(
            f"classes {empty.tolist()} have no samples; statistics are undefined"
        )
    means = np.zeros((k, d))
    covs = np.zeros((k, d, d))
    for c in range(k):
        rows = feats[dataset.labels == c]
        mu = rows.mean(axis=0)
        means[c] = mu
        if rows.shape[0] > 1:
            dev = rows - mu
            cov = dev.T @ dev / (rows.shape[0] - 1)
            covs[c] = (cov + cov.T) / 2.0  # kill BLAS rounding asymmetry
    return ClassStats(means, covs, counts.astype(np.int64))
