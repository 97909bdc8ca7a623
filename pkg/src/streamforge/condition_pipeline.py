"""Synthetic condition generation, quality scoring and curation.

Clean conditions carry unit-scale embeddings and smooth audio. Two
degradations stand in for poor training data: ``dim`` shrinks the reference
image embedding by 10x and ``noisy`` buries the audio under white noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ltv1
from .diffusion_core import MultimodalCondition

KINDS = ("clean", "dim", "noisy")


@dataclass(frozen=True)
class Degradation:
    clean_fraction: float = 1.0
    dim_fraction: float = 0.0
    noisy_fraction: float = 0.0

    def __post_init__(self):
        fr = (self.clean_fraction, self.dim_fraction, self.noisy_fraction)
        if any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"degradation fractions must be >= 0 and sum to 1, got {fr}")

    def counts(self, n: int) -> tuple:
        """Largest-remainder split of ``n`` into (clean, dim, noisy)."""
        fr = np.array([self.clean_fraction, self.dim_fraction, self.noisy_fraction])
        raw = fr * n
        base = np.floor(raw).astype(int)
        order = np.argsort(-(raw - base), kind="stable")
        base[order[: n - base.sum()]] += 1
        return tuple(int(v) for v in base)


@dataclass(frozen=True)
class ConditionQuality:
    brightness: float
    sharpness: float
    audio_snr: float  # dB, +inf when no noise was injected


@dataclass(frozen=True)
class Thresholds:
    brightness: float = 0.5
    audio_snr: float = 10.0
    sharpness: float = -math.inf


DIM_FACTOR = 0.1
NOISE_TO_SIGNAL = 4.0


def smooth_audio(rng: np.random.Generator, n_frames: int, n_harmonics: int = 3) -> np.ndarray:
    """Band-limited drive: a few low-frequency sinusoids, unit variance."""
    f = np.arange(n_frames)
    sig = np.zeros(n_frames)
    for _ in range(n_harmonics):
        period = rng.uniform(5.0, 14.0)
        sig += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f / period + rng.uniform(0, 2 * np.pi))
    sd = sig.std()
    return sig / sd if sd > 0 else sig


def make_condition(rng: np.random.Generator, kind: str = "clean", n_frames: int = 21, d_c: int = 4) -> MultimodalCondition:
    if kind not in KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    text = rng.normal(0.0, 1.0, d_c)
    img = rng.uniform(0.7, 1.3, d_c)
    audio = smooth_audio(rng, n_frames)
    noise_var = 0.0
    if kind == "dim":
        img = DIM_FACTOR * img
    elif kind == "noisy":
        noise_var = NOISE_TO_SIGNAL * float(audio.var())
        audio = audio + rng.normal(0.0, math.sqrt(noise_var), n_frames)
    return MultimodalCondition(text, img, audio, audio_noise_var=noise_var)


def generate_conditions(rng: np.random.Generator, n: int, degradation: Degradation | None = None, n_frames: int = 21, d_c: int = 4):
    """``n`` conditions in a seeded shuffled order; returns ``(conditions, kinds)``."""
    degradation = degradation or Degradation()
    counts = degradation.counts(n)
    kinds = [k for k, m in zip(KINDS, counts) for _ in range(m)]
    kinds = [kinds[i] for i in rng.permutation(n)]
    conds = [make_condition(rng, k, n_frames, d_c) for k in kinds]
    return conds, kinds


def score_condition(c: MultimodalCondition) -> ConditionQuality:
    img = c.img_emb
    if c.audio_noise_var > 0:
        snr = 10.0 * math.log10(float(c.audio.var()) / c.audio_noise_var)
    else:
        snr = math.inf
    return ConditionQuality(float(img.mean()), float(img.var()), snr)


def filter_conditions(conditions, thresholds: Thresholds | None = None, refine=None):
    """Partition into ``kept`` and ``[(condition, [failing metric, ...]), ...]``.

    ``refine`` (identity by default) is applied before scoring.
    """
    thresholds = thresholds or Thresholds()
    kept, rejected = [], []
    for c in conditions:
        c = refine(c) if refine is not None else c
        q = score_condition(c)
        fails = [
            name for name in ("brightness", "sharpness", "audio_snr")
            if not getattr(q, name) >= getattr(thresholds, name)
        ]
        if fails:
            rejected.append((c, fails))
        else:
            kept.append(c)
    return kept, rejected


def curated_conditions(rng: np.random.Generator, n: int, degradation: Degradation, thresholds: Thresholds | None = None, n_frames: int = 21, d_c: int = 4, max_rounds: int = 50):
    """Draw from the degraded source until ``n`` conditions pass the filter."""
    kept = []
    for _ in range(max_rounds):
        batch, _ = generate_conditions(rng, max(n, 8), degradation, n_frames, d_c)
        kept.extend(filter_conditions(batch, thresholds)[0])
        if len(kept) >= n:
            return kept[:n]
    raise RuntimeError(f"only {len(kept)} of {n} conditions passed the filter")


def save_conditions(out_dir, conditions, kinds=None, extra: dict | None = None) -> Path:
    """Write one LTv1 tensor per field plus a manifest with quality scores."""
    out_dir = Path(out_dir)
    conds = list(conditions)
    text = np.stack([c.text_emb for c in conds]) if conds else np.zeros((0, 0))
    img = np.stack([c.img_emb for c in conds]) if conds else np.zeros((0, 0))
    audio = np.stack([c.audio for c in conds]) if conds else np.zeros((0, 0))
    ltv1.save(out_dir / "text_emb.lt", text)
    ltv1.save(out_dir / "img_emb.lt", img)
    ltv1.save(out_dir / "audio.lt", audio)
    entries = []
    for i, c in enumerate(conds):
        q = score_condition(c)
        entries.append({
            "index": i,
            "kind": kinds[i] if kinds is not None else None,
            "audio_noise_var": c.audio_noise_var,
            "quality": {k: (None if math.isinf(v) else v) for k, v in asdict(q).items()},
        })
    manifest = {"count": len(conds), "conditions": entries}
    manifest.update(extra or {})
    return ltv1.write_manifest(out_dir / "conditions.json", manifest)


def load_conditions(in_dir):
    """Inverse of :func:`save_conditions` (float32 round trip)."""
    in_dir = Path(in_dir)
    manifest = ltv1.read_manifest(in_dir / "conditions.json")
    text = ltv1.load(in_dir / "text_emb.lt").astype(float)
    img = ltv1.load(in_dir / "img_emb.lt").astype(float)
    audio = ltv1.load(in_dir / "audio.lt").astype(float)
    conds = [
        MultimodalCondition(text[i], img[i], audio[i], audio_noise_var=e["audio_noise_var"])
        for i, e in enumerate(manifest["conditions"])
    ]
    return conds, manifest
