"""Multivariate Gaussian sampling with PSD repair.

Randomness is drawn from numpy's Philox counter-based generator keyed by a
stream id, so draws are bitwise-reproducible across platforms and independent
of scheduling: the same stream id always yields the same values, and distinct
ids yield independent streams. That reproducibility is part of the on-disk
determinism contract of the toolkit.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

DEFAULT_MAX_JITTER = 1e-4
_SYMMETRY_TOL = 1e-9


def rng_from_stream(stream: int | Sequence[int]) -> np.random.Generator:
    """Counter-based generator keyed by an integer (or tuple-of-ints) stream id."""
    if isinstance(stream, (int, np.integer)):
        entropy: list[int] = [int(stream)]
    else:
        entropy = [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(*parts: int) -> int:
    """Mix integers into a fresh 64-bit seed (epoch seeds, substreams, ...)."""
    seq = np.random.SeedSequence([int(p) for p in parts])
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of a (possibly jittered) covariance."""

    lower: np.ndarray
    jitter_used: float


def _semidefinite_cholesky(a: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray | None:
    """Outer-product Cholesky that tolerates exactly singular PSD matrices.

    Pivots within rel_tol of zero produce a zero column (the semidefinite
    direction); a pivot below -tol means the matrix is indefinite and None is
    returned so the caller can escalate jitter.
    """
    d = a.shape[0]
    lower = np.zeros_like(a)
    scale = float(np.max(np.diag(a), initial=0.0))
    tol = rel_tol * scale if scale > 0 else rel_tol
    for j in range(d):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot > tol:
            lower[j, j] = np.sqrt(pivot)
            if j + 1 < d:
                lower[j + 1:, j] = (a[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / lower[j, j]
        elif pivot < -tol:
            return None
    recon_err = np.linalg.norm(lower @ lower.T - a)
    if recon_err > 1e-8 * max(np.linalg.norm(a), 1e-300):
        return None
    return lower


def _jitter_schedule(max_jitter: float) -> list[float]:
    schedule = [0.0]
    j = 1e-10
    while j < max_jitter:
        schedule.append(j)
        j *= 10.0
    if max_jitter > 0:
        schedule.append(max_jitter)
    return schedule


def cholesky_psd(covariance: np.ndarray,
                 max_jitter: float = DEFAULT_MAX_JITTER) -> CholeskyFactor:
    """Factor a covariance as L @ L.T, adding diagonal jitter only if needed.

    Jitter escalates geometrically (0, 1e-10, 1e-9, ...) up to max_jitter;
    the amount actually used is recorded on the returned factor. Exactly
    singular PSD matrices (zero covariance, rank-deficient averages) factor
    at jitter 0.
    """
    cov = np.asarray(covariance, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValidationError(f"covariance must be square, got shape {cov.shape}")
    asym = np.abs(cov - cov.T).max() if cov.size else 0.0
    if asym > _SYMMETRY_TOL * max(1.0, np.abs(cov).max()):
        raise ValidationError(f"covariance asymmetry {asym:.3e} exceeds tolerance")
    sym = (cov + cov.T) / 2.0
    eye = np.eye(cov.shape[0])
    for jitter in _jitter_schedule(max_jitter):
        target = sym if jitter == 0.0 else sym + jitter * eye
        try:
            return CholeskyFactor(np.linalg.cholesky(target), jitter)
        except np.linalg.LinAlgError:
            pass
        if jitter == 0.0:
            lower = _semidefinite_cholesky(target)
            if lower is not None:
                return CholeskyFactor(lower, 0.0)
    smallest = float(np.linalg.eigvalsh(sym).min())
    raise NumericalError(
        f"covariance is not PSD within jitter {max_jitter:g}; "
        f"smallest eigenvalue ~ {smallest:.3e}"
    )


def sample_gaussian(dist, n: int, stream: int | Sequence[int],
                    max_jitter: float = DEFAULT_MAX_JITTER) -> np.ndarray:
    """Draw n samples mean + eps @ L.T from a calibrated Gaussian.

    *dist* is anything with .mean and .covariance attributes. Deterministic
    given the stream id; n = 0 yields an empty (0, D) matrix.
    """
    if n < 0:
        raise ValidationError("sample count must be >= 0")
    mean = np.asarray(dist.mean, dtype=np.float64)
    factor = cholesky_psd(dist.covariance, max_jitter=max_jitter)
    rng = rng_from_stream(stream)
    eps = rng.standard_normal((n, mean.shape[0]))
    return mean + eps @ factor.lower.T
