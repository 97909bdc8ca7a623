"""Gaussian Frechet distance, audio/motion sync, pooled z-score percentiles, CSV rows."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

EIG_CLAMP = -1e-8


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(samples) -> GaussianSummary:
    """Sample mean and unbiased covariance; each sample is flattened."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 0 or x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a Gaussian")
    x = x.reshape(x.shape[0], -1)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianSummary(mean, cov, x.shape[0])


def sqrtm_psd(mat) -> np.ndarray:
    """Symmetric square root via eigendecomposition, clamping tiny negative eigenvalues."""
    mat = np.asarray(mat, dtype=float)
    mat = 0.5 * (mat + mat.T)
    lam, q = np.linalg.eigh(mat)
    if lam.size and lam.min() < EIG_CLAMP * max(1.0, abs(lam).max()):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {lam.min():.3e})")
    lam = np.clip(lam, 0.0, None)
    return (q * np.sqrt(lam)) @ q.T


def gaussian_frechet(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = 0.5 * (inner + inner.T)
    lam = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(lam).sum()
    return float(max(value, 0.0))


def frechet_to(samples, mean, cov) -> float:
    """Frechet distance from a sample set to an analytic Gaussian."""
    return gaussian_frechet(fit_gaussian(samples), GaussianSummary(mean, cov))


@dataclass(frozen=True)
class SyncResult:
    confidence: float
    offset: int
    correlations: tuple = ()


class ZeroVarianceError(ValueError):
    pass


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / denom) if denom > 0 else 0.0


def sync_metric(audio_envelope, motion, max_offset: int = 3) -> SyncResult:
    """Cross-correlate audio against motion over integer lags.

    A positive offset means motion lags the audio. Confidence is the peak
    correlation minus the median over all lags; ties on the peak go to the
    smallest ``|offset|``.
    """
    audio = np.asarray(audio_envelope, dtype=float)
    motion = np.asarray(motion, dtype=float)
    if audio.shape != motion.shape or audio.ndim != 1:
        raise ValueError("audio envelope and motion must be 1-D series of equal length")
    T = audio.size
    if T <= 2 * max_offset:
        raise ValueError(f"series length {T} must exceed 2 * max_offset = {2 * max_offset}")
    if np.ptp(audio) == 0.0 or np.ptp(motion) == 0.0:
        raise ZeroVarianceError("sync metric is undefined for a constant series")
    offsets = np.arange(-max_offset, max_offset + 1)
    corrs = []
    for k in offsets:
        if k >= 0:
            corrs.append(_pearson(audio[: T - k], motion[k:]))
        else:
            corrs.append(_pearson(audio[-k:], motion[: T + k]))
    corrs = np.array(corrs)
    peak = corrs.max()
    ties = offsets[np.isclose(corrs, peak, rtol=0.0, atol=1e-12)]
    best = int(sorted(ties, key=lambda k: (abs(k), k))[0])
    return SyncResult(float(peak - np.median(corrs)), best, tuple(float(c) for c in corrs))


def motion_series(video) -> np.ndarray:
    """Per-frame displacement magnitude ``||x[f] - x[f-1]||`` (length F - 1)."""
    video = np.asarray(video, dtype=float)
    return np.linalg.norm(np.diff(video, axis=-2), axis=-1)


def audio_envelope(audio) -> np.ndarray:
    return np.abs(np.diff(np.asarray(audio, dtype=float)))


@dataclass(frozen=True)
class PercentileResult:
    means: dict
    degenerate: bool = False


def zscore_percentiles(scores: dict, method: str = "normal") -> PercentileResult:
    """Pool every method's scores, z-score on the pool, map to 0-100 percentiles.

    ``method="normal"`` uses the standard-normal CDF of z; ``"rank"`` uses the
    empirical mid-rank within the pool instead.
    """
    names = list(scores)
    pooled = np.concatenate([np.asarray(scores[k], dtype=float).reshape(-1) for k in names])
    if pooled.size == 0:
        return PercentileResult({k: float("nan") for k in names}, degenerate=True)
    mu, sd = pooled.mean(), pooled.std()
    if not sd > 0:
        return PercentileResult({k: 50.0 for k in names}, degenerate=True)
    means = {}
    for k in names:
        x = np.asarray(scores[k], dtype=float).reshape(-1)
        if method == "normal":
            pct = 100.0 * ndtr((x - mu) / sd)
        elif method == "rank":
            below = (pooled[None, :] < x[:, None]).sum(axis=1)
            equal = (pooled[None, :] == x[:, None]).sum(axis=1)
            pct = 100.0 * (below + 0.5 * equal) / pooled.size
        else:
            raise ValueError(f"unknown percentile method {method!r}")
        means[k] = float(pct.mean()) if x.size else float("nan")
    return PercentileResult(means)


REPORT_COLUMNS = ("method", "metric", "value", "n", "seed")


def report(rows) -> str:
    """Render rows (dicts or tuples in column order) as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        if isinstance(row, dict):
            row = [row[c] for c in REPORT_COLUMNS]
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_report(text: str) -> list:
    return list(csv.DictReader(io.StringIO(text)))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
