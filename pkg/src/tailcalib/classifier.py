"""Linear and cosine-similarity classifier heads with an SGD training loop.

The cosine head scores gamma * cos(z, w_k) with gamma = softplus(gamma_raw),
so the scale stays positive without clamping and is trained by the same
optimizer as the weights. Training modes differ only in what features each
epoch sees: the originals (plain), originals plus one generated balancing set
(tailcalib), originals plus a freshly generated set every epoch (tailcalibx),
or one of the reference baselines.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .baselines import BaselineSpec, feature_mixup_batch, gaussian_noise_balance, oversample_balance
from .calibrate import GenerationConfig, epoch_config, generate_balanced
from .errors import CorruptionError, DomainError, FormatError, NumericalError, ValidationError
from .sampler import derive_seed, rng_from_stream
from .store import FeatureDataset
from .transform import l2_normalize

CHECKPOINT_MAGIC = b"TCLF"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIII")  # magic, version, mode, has_bias, K, D

TRAIN_MODES = ("plain", "tailcalib", "tailcalibx", "oversample", "noise", "mixup")
LR_SCHEDULES = ("constant", "cosine-decay")

# Providers map an epoch index to the (features, labels) the optimizer sees.
EpochProvider = Callable[[int], tuple[np.ndarray, np.ndarray]]


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ValidationError("softplus is positive; cannot invert a nonpositive value")
    return float(y + np.log(-np.expm1(-y)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Classifier:
    """Weight matrix (K x D) plus optional bias; cosine mode has no bias."""

    weights: np.ndarray
    bias: Optional[np.ndarray]
    mode: str
    gamma_raw: float = 0.0

    def __post_init__(self):
        if self.mode not in ("linear", "cosine"):
            raise ValidationError(f"mode must be 'linear' or 'cosine', got {self.mode!r}")
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValidationError("weights must be K x D")
        if self.mode == "cosine" and self.bias is not None:
            raise ValidationError("cosine mode admits no bias")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValidationError("bias must have one entry per class")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def scale(self) -> float:
        """Effective cosine scale, softplus(gamma_raw); always positive."""
        return float(softplus(self.gamma_raw))

    def copy(self) -> "Classifier":
        return Classifier(self.weights.copy(),
                          None if self.bias is None else self.bias.copy(),
                          self.mode, self.gamma_raw)


def init_classifier(num_classes: int, dim: int, mode: str = "linear",
                    seed: int = 0, init_scale: float = 16.0) -> Classifier:
    """Fresh classifier: rows uniform in [-1/sqrt(D), 1/sqrt(D)], seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57494E49]))
    bound = 1.0 / np.sqrt(dim)
    weights = rng.uniform(-bound, bound, size=(num_classes, dim))
    if mode == "linear":
        return Classifier(weights, np.zeros(num_classes), mode)
    return Classifier(weights, None, mode, gamma_raw=softplus_inverse(init_scale))


def _row_norms(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DomainError(f"{what} row {int(zero[0])} has zero norm; cosine logits undefined")
    return norms


def logits(classifier: Classifier, features: np.ndarray) -> np.ndarray:
    """Class scores, n x K. Cosine logits are gamma * cos and live in
    [-gamma, gamma]; linear logits are W z (+ bias)."""
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != classifier.dim:
        raise ValidationError(
            f"features must be n x {classifier.dim}, got shape {z.shape}"
        )
    if classifier.mode == "linear":
        out = z @ classifier.weights.T
        if classifier.bias is not None:
            out = out + classifier.bias
        return out
    zn = _row_norms(z, "feature")
    wn = _row_norms(classifier.weights, "weight")
    cos = (z / zn[:, None]) @ (classifier.weights / wn[:, None]).T
    np.clip(cos, -1.0, 1.0, out=cos)  # rounding can overshoot |cos| = 1
    return classifier.scale * cos


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce_loss(logits_: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient (softmax - onehot) / n."""
    s = np.asarray(logits_, dtype=np.float64)
    if np.isnan(s).any():
        raise NumericalError("NaN logits passed to the loss")
    y = np.asarray(labels, dtype=np.int64)
    n, k = s.shape
    if y.shape != (n,) or (y < 0).any() or (y >= k).any():
        raise ValidationError("labels must be valid class ids, one per row")
    logp = _log_softmax(s)
    loss = float(-logp[np.arange(n), y].mean())
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad


def softmax_ce_loss_soft(logits_: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy against soft target distributions (mixup labels)."""
    s = np.asarray(logits_, dtype=np.float64)
    if np.isnan(s).any():
        raise NumericalError("NaN logits passed to the loss")
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != s.shape:
        raise ValidationError("targets must match the logits shape")
    logp = _log_softmax(s)
    loss = float(-(t * logp).sum(axis=1).mean())
    grad = (np.exp(logp) - t) / s.shape[0]
    return loss, grad


def loss_and_grads(classifier: Classifier, features: np.ndarray,
                   labels: np.ndarray | None = None,
                   soft_targets: np.ndarray | None = None,
                   ) -> tuple[float, np.ndarray, Optional[np.ndarray], float]:
    """Loss plus analytic gradients w.r.t. weights, bias, and gamma_raw.

    Exactly one of labels / soft_targets must be given. Returns
    (loss, d_weights, d_bias or None, d_gamma_raw).
    """
    if (labels is None) == (soft_targets is None):
        raise ValidationError("pass exactly one of labels or soft_targets")
    z = np.asarray(features, dtype=np.float64)

    def ce(scores):
        if labels is not None:
            return softmax_ce_loss(scores, labels)
        return softmax_ce_loss_soft(scores, soft_targets)

    if classifier.mode == "linear":
        scores = z @ classifier.weights.T
        if classifier.bias is not None:
            scores = scores + classifier.bias
        loss, g = ce(scores)
        d_w = g.T @ z
        d_b = g.sum(axis=0) if classifier.bias is not None else None
        return loss, d_w, d_b, 0.0

    zn = _row_norms(z, "feature")
    wn = _row_norms(classifier.weights, "weight")
    u = z / zn[:, None]
    v = classifier.weights / wn[:, None]
    cos = u @ v.T
    np.clip(cos, -1.0, 1.0, out=cos)
    gamma = classifier.scale
    loss, g = ce(gamma * cos)
    col = (g * cos).sum(axis=0)  # per-class sum of g_ik cos_ik
    d_w = gamma * (g.T @ u - col[:, None] * v) / wn[:, None]
    d_gamma_raw = float((g * cos).sum()) * float(_sigmoid(classifier.gamma_raw))
    return loss, d_w, None, d_gamma_raw


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    learning_rate: float = 0.001
    lr_schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 5e-5
    seed: int = 0
    mode: str = "plain"
    generation: Optional[GenerationConfig] = None
    baseline: Optional[BaselineSpec] = None
    classifier_kind: str = "linear"
    init_scale: float = 16.0
    warm_start: Optional[Classifier] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.mode not in TRAIN_MODES:
            raise ValidationError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValidationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.classifier_kind not in ("linear", "cosine"):
            raise ValidationError("classifier_kind must be 'linear' or 'cosine'")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_schedule": self.lr_schedule,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "mode": self.mode,
            "generation": None if self.generation is None else self.generation.to_dict(),
            "baseline": None if self.baseline is None else {
                "kind": self.baseline.kind,
                "noise_scale": self.baseline.noise_scale,
                "mixup_alpha": self.baseline.mixup_alpha,
                "seed": self.baseline.seed,
            },
            "classifier_kind": self.classifier_kind,
            "init_scale": self.init_scale,
        }


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best: Optional[Classifier] = None


def epoch_provider(dataset: FeatureDataset, config: TrainConfig) -> EpochProvider:
    """Build the per-epoch feature source for the configured training mode.

    tailcalib/tailcalibx modes train on the pipeline-space originals
    (row-normalized when the generation config says so) plus the generated
    set, so both halves live in the same space.
    """
    gen_cfg = config.generation if config.generation is not None else GenerationConfig()
    feats = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    counts = np.bincount(labels, minlength=dataset.num_classes)
    target = gen_cfg.target_count if gen_cfg.target_count is not None else int(counts.max())

    if config.mode in ("plain", "mixup"):
        return lambda epoch: (feats, labels)

    if config.mode in ("oversample", "noise"):
        spec = config.baseline if config.baseline is not None else BaselineSpec(
            kind="oversample" if config.mode == "oversample" else "gaussian_noise")
        if config.mode == "oversample":
            balanced = oversample_balance(dataset, target, spec.seed)
        else:
            balanced = gaussian_noise_balance(dataset, target, spec.noise_scale, spec.seed)
        bal_feats = np.asarray(balanced.features, dtype=np.float64)
        bal_labels = np.asarray(balanced.labels)
        return lambda epoch: (bal_feats, bal_labels)

    base = l2_normalize(feats) if gen_cfg.normalize else feats

    if config.mode == "tailcalib":
        gen = generate_balanced(dataset, gen_cfg)
        comb_feats = np.concatenate([base, np.asarray(gen.features)])
        comb_labels = np.concatenate([labels, np.asarray(gen.labels)])
        return lambda epoch: (comb_feats, comb_labels)

    def fresh(epoch: int) -> tuple[np.ndarray, np.ndarray]:
        gen = generate_balanced(dataset, epoch_config(gen_cfg, epoch))
        return (np.concatenate([base, np.asarray(gen.features)]),
                np.concatenate([labels, np.asarray(gen.labels)]))

    return fresh


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))


def _accuracy(classifier: Classifier, dataset: FeatureDataset) -> float:
    preds = logits(classifier, dataset.features).argmax(axis=1)
    return float((preds == dataset.labels).mean())


def train_classifier(provider: EpochProvider, val: Optional[FeatureDataset],
                     config: TrainConfig) -> tuple[Classifier, TrainingLog]:
    """Mini-batch SGD with momentum and (weights-only) L2 weight decay.

    The decay gradient is folded into the momentum buffer, so a step with
    zero data gradient shrinks the weights by exactly (1 - lr * decay).
    Batches come from a seeded shuffle per epoch; everything is deterministic
    given the config. The best validation epoch is kept on the log.
    """
    clf: Optional[Classifier] = None
    vel_w = vel_b = None
    vel_g = 0.0
    log = TrainingLog()
    best_acc = -np.inf

    for epoch in range(config.epochs):
        feats, labels = provider(epoch)
        feats = np.asarray(feats, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if clf is None:
            if val is not None:
                num_classes = val.num_classes
            else:
                num_classes = int(labels.max()) + 1
            if config.warm_start is not None:
                clf = config.warm_start.copy()
            else:
                clf = init_classifier(num_classes, feats.shape[1],
                                      config.classifier_kind, config.seed,
                                      config.init_scale)
            vel_w = np.zeros_like(clf.weights)
            vel_b = None if clf.bias is None else np.zeros_like(clf.bias)

        lr = _epoch_lr(config, epoch)
        shuffle = rng_from_stream((config.seed, 0x53485546, epoch))
        perm = shuffle.permutation(feats.shape[0])
        onehot = np.eye(clf.num_classes) if config.mode == "mixup" else None
        loss_sum = 0.0

        for batch_index, start in enumerate(range(0, perm.size, config.batch_size)):
            batch = perm[start:start + config.batch_size]
            zb, yb = feats[batch], labels[batch]
            if config.mode == "mixup":
                spec = config.baseline if config.baseline is not None else BaselineSpec(
                    kind="feature_mixup")
                zb, targets = feature_mixup_batch(
                    zb, onehot[yb], spec.mixup_alpha,
                    seed=derive_seed(spec.seed, epoch, batch_index))
                loss, d_w, d_b, d_g = loss_and_grads(clf, zb, soft_targets=targets)
            else:
                loss, d_w, d_b, d_g = loss_and_grads(clf, zb, labels=yb)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"training diverged: loss={loss} at epoch {epoch}, "
                    f"batch {batch_index}, lr={lr:g}"
                )
            vel_w = config.momentum * vel_w + (d_w + config.weight_decay * clf.weights)
            clf.weights -= lr * vel_w
            if clf.bias is not None:
                vel_b = config.momentum * vel_b + d_b
                clf.bias -= lr * vel_b
            if clf.mode == "cosine":
                vel_g = config.momentum * vel_g + d_g
                clf.gamma_raw -= lr * vel_g
            loss_sum += loss * batch.size

        record = {
            "epoch": epoch,
            "train_loss": loss_sum / perm.size,
            "learning_rate": lr,
            "samples": int(perm.size),
        }
        if val is not None:
            acc = _accuracy(clf, val)
            record["val_accuracy"] = acc
            if acc > best_acc:
                best_acc = acc
                log.best_epoch = epoch
                log.best = clf.copy()
        log.records.append(record)

    assert clf is not None
    return clf, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(classifier: Classifier, path: str | Path,
                    metadata: dict | None = None) -> None:
    """Binary checkpoint; optional JSON metadata goes to a sidecar file."""
    path = Path(path)
    mode_tag = 0 if classifier.mode == "linear" else 1
    has_bias = 0 if classifier.bias is None else 1
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, mode_tag,
                                   has_bias, classifier.num_classes, classifier.dim))
        fh.write(struct.pack("<d", classifier.gamma_raw))
        fh.write(np.ascontiguousarray(classifier.weights, dtype="<f8").tobytes())
        if classifier.bias is not None:
            fh.write(np.ascontiguousarray(classifier.bias, dtype="<f8").tobytes())
    if metadata is not None:
        import json

        from .store import sidecar_path
        sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Classifier:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    _, version, mode_tag, has_bias, k, d = _CKPT_HEADER.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _CKPT_HEADER.size + 8 + k * d * 8 + (k * 8 if has_bias else 0)
    if len(data) != expected:
        raise CorruptionError(f"{path}: {len(data)} bytes, header implies {expected}")
    off = _CKPT_HEADER.size
    (gamma_raw,) = struct.unpack_from("<d", data, off)
    off += 8
    weights = np.frombuffer(data, dtype="<f8", count=k * d, offset=off).reshape(k, d).copy()
    off += k * d * 8
    bias = None
    if has_bias:
        bias = np.frombuffer(data, dtype="<f8", count=k, offset=off).copy()
    return Classifier(weights, bias, "linear" if mode_tag == 0 else "cosine", gamma_raw)
