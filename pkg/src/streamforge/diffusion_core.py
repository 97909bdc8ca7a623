"""Noise process, the conditional-Gaussian toy world and its exact teacher.

Conventions: ``t = 0`` is clean data, ``t = 1`` is pure noise, and
``x_t = alpha(t) * x0 + sigma(t) * eps``. Latent videos are arrays of shape
``(..., F, d)``; any leading axes are treated as a batch.

The world's covariance is ``R (x) base_var * I_d`` where ``R`` is the AR(1)
frame-correlation matrix, so every posterior computation reduces to an
``F x F`` linear map along the frame axis, shared by all latent dims.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

MODALITIES = ("text", "img", "audio")


class ConfigurationError(ValueError):
    """A world or schedule whose parameters do not define a valid model."""


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Rectified-flow schedule on a uniform grid: alpha = 1 - t, sigma = t."""

    n_steps: int = 48

    def __post_init__(self):
        if int(self.n_steps) < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_steps + 1)

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=float)

    def sigma(self, t):
        return np.asarray(t, dtype=float)

    @property
    def name(self) -> str:
        return "rectified"


@dataclass(frozen=True)
class CosineSchedule(NoiseSchedule):
    """Variance-preserving alternative: alpha = cos(pi t / 2), sigma = sin(pi t / 2)."""

    def alpha(self, t):
        a = np.cos(0.5 * math.pi * np.asarray(t, dtype=float))
        return np.where(np.asarray(t) >= 1.0, 0.0, a)

    def sigma(self, t):
        return np.sin(0.5 * math.pi * np.asarray(t, dtype=float))

    @property
    def name(self) -> str:
        return "cosine"


def make_schedule(n_steps: int, kind: str = "rectified") -> NoiseSchedule:
    if int(n_steps) < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    if kind == "rectified":
        return NoiseSchedule(int(n_steps))
    if kind == "cosine":
        return CosineSchedule(int(n_steps))
    raise ValueError(f"unknown schedule kind {kind!r}")


def add_noise(x0, t: float, eps, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    return float(sched.alpha(t)) * x0 + float(sched.sigma(t)) * eps


def ddim_step(x, x0_hat, t: float, t_next: float, sched: NoiseSchedule):
    """Deterministic move from ``t`` to ``t_next`` given a clean estimate.

    For the rectified schedule this is exactly one Euler step of the
    probability-flow ODE with velocity ``(x - x0_hat) / t``.
    """
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    a2, s2 = float(sched.alpha(t_next)), float(sched.sigma(t_next))
    if s2 == 0.0:
        return np.array(x0_hat, dtype=float, copy=True)
    eps_hat = (x - a * x0_hat) / s
    return a2 * x0_hat + s2 * eps_hat


# --------------------------------------------------------------------------
# conditions and latents
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MultimodalCondition:
    """Text and image embeddings plus one scalar audio drive per latent frame.

    A null modality is the zero vector with its flag set. ``audio_noise_var``
    records how much noise was injected into the audio track (0 for clean).
    """

    text_emb: np.ndarray
    img_emb: np.ndarray
    audio: np.ndarray
    text_null: bool = False
    img_null: bool = False
    audio_null: bool = False
    audio_noise_var: float = 0.0

    def __post_init__(self):
        for name in ("text_emb", "img_emb", "audio"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
            object.__setattr__(self, name, arr)
        if self.text_emb.shape != self.img_emb.shape:
            raise ValueError("text and image embeddings must share a dimension")

    @property
    def num_frames(self) -> int:
        return self.audio.shape[0]

    @property
    def d_c(self) -> int:
        return self.text_emb.shape[0]

    def drop(self, *modalities: str) -> "MultimodalCondition":
        changes = {}
        for m in modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")
            key = "text_emb" if m == "text" else "img_emb" if m == "img" else "audio"
            changes[key] = np.zeros_like(getattr(self, key))
            changes[f"{m}_null"] = True
        return replace(self, **changes)

    def only(self, modality: str) -> "MultimodalCondition":
        return self.drop(*(m for m in MODALITIES if m != modality))

    def null(self) -> "MultimodalCondition":
        return self.drop(*MODALITIES)

    def with_audio(self, audio) -> "MultimodalCondition":
        return replace(self, audio=np.asarray(audio, dtype=float))

    def frame_features(self, start: int, stop: int) -> np.ndarray:
        """Rows ``[c_text; c_img; audio[f]]`` for frames ``start..stop-1``."""
        if stop > self.num_frames:
            raise ValueError(
                f"audio has {self.num_frames} frames, frames up to {stop - 1} requested"
            )
        n = stop - start
        static = np.concatenate([self.text_emb, self.img_emb])
        return np.concatenate(
            [np.broadcast_to(static, (n, static.size)), self.audio[start:stop, None]], axis=1
        )

    def equals(self, other: "MultimodalCondition") -> bool:
        return (
            np.array_equal(self.text_emb, other.text_emb)
            and np.array_equal(self.img_emb, other.img_emb)
            and np.array_equal(self.audio, other.audio)
            and (self.text_null, self.img_null, self.audio_null)
            == (other.text_null, other.img_null, other.audio_null)
        )


@dataclass(frozen=True, eq=False)
class LatentVideo:
    frames: np.ndarray
    block_size: int = 3

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=float)
        object.__setattr__(self, "frames", arr)
        if arr.ndim < 2:
            raise ValueError("latent video must be (..., F, d)")
        if arr.shape[-2] % self.block_size:
            raise ValueError(
                f"frame count {arr.shape[-2]} is not a multiple of block size {self.block_size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent video contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[-2]

    @property
    def num_blocks(self) -> int:
        return self.num_frames // self.block_size

    def block(self, j: int) -> np.ndarray:
        b = self.block_size
        return self.frames[..., j * b : (j + 1) * b, :]


# --------------------------------------------------------------------------
# the toy world
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _ar1_corr(rho: float, n: int) -> np.ndarray:
    idx = np.arange(n)
    corr = rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)
    corr.setflags(write=False)
    return corr


@functools.lru_cache(maxsize=64)
def _ar1_eig(rho: float, n: int):
    lam, q = np.linalg.eigh(_ar1_corr(rho, n))
    lam = np.clip(lam, 0.0, None)
    lam.setflags(write=False)
    q.setflags(write=False)
    return lam, q


def soft_clip(v, scale: float | None):
    """``scale * tanh(v / scale)``: identity near zero, saturating at ``+-scale``."""
    v = np.asarray(v, dtype=float)
    if scale is None:
        return v
    return scale * np.tanh(v / scale)


@dataclass(frozen=True, eq=False)
class GaussianWorld:
    """x0 | c ~ N(mu_c, R(rho) (x) base_var * I_d).

    ``mu_c[f] = M_text c_text + M_img r(c_img) + M_audio * r(audio[f])``
    where ``r`` is :func:`soft_clip` with the per-modality saturation scale
    (None keeps the response linear). Saturation gives conditions outside
    the clean range a different local response, which a linear student
    cannot fit jointly. The frame count is taken from the condition's audio
    track, so the same world describes short training clips and long streams.
    """

    M_text: np.ndarray
    M_img: np.ndarray
    M_audio: np.ndarray
    rho: float = 0.9
    base_var: float = 0.25
    F: int = 21
    img_saturation: float | None = None
    audio_saturation: float | None = None

    def __post_init__(self):
        for name in ("M_text", "M_img", "M_audio"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not -1.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (-1, 1), got {self.rho}")
        for name in ("img_saturation", "audio_saturation"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be positive or None, got {v}")
        if not self.base_var >= 0.0:
            raise ConfigurationError(f"base_var must be >= 0, got {self.base_var}")
        d = self.M_audio.shape[0]
        if self.M_text.shape != self.M_img.shape or self.M_text.shape[0] != d:
            raise ConfigurationError("condition maps must all map into the latent dim")

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        d: int = 8,
        d_c: int = 4,
        F: int = 21,
        rho: float = 0.9,
        base_var: float = 0.25,
        audio_gain: float = 1.0,
        img_saturation: float | None = None,
        audio_saturation: float | None = None,
    ) -> "GaussianWorld":
        scale = 1.0 / math.sqrt(d_c)
        return cls(
            M_text=rng.normal(0.0, scale, (d, d_c)),
            M_img=rng.normal(0.0, scale, (d, d_c)),
            M_audio=audio_gain * rng.normal(0.0, 1.0, d) / math.sqrt(d) * math.sqrt(2.0),
            rho=rho,
            base_var=base_var,
            F=F,
            img_saturation=img_saturation,
            audio_saturation=audio_saturation,
        )

    @property
    def d(self) -> int:
        return self.M_audio.shape[0]

    @property
    def d_c(self) -> int:
        return self.M_text.shape[1]

    def static_mean(self, c: MultimodalCondition) -> np.ndarray:
        return self.M_text @ c.text_emb + self.M_img @ soft_clip(c.img_emb, self.img_saturation)

    def mean(self, c: MultimodalCondition, n_frames: int | None = None) -> np.ndarray:
        n = c.num_frames if n_frames is None else n_frames
        if n > c.num_frames:
            raise ValueError(f"condition has {c.num_frames} audio frames, need {n}")
        audio = soft_clip(c.audio[:n], self.audio_saturation)
        return self.static_mean(c)[None, :] + np.outer(audio, self.M_audio)

    def frame_corr(self, n_frames: int | None = None) -> np.ndarray:
        return _ar1_corr(float(self.rho), int(n_frames or self.F))

    def covariance(self, n_frames: int | None = None) -> np.ndarray:
        """Dense ``(F*d, F*d)`` covariance in row-major frame/dim order."""
        return np.kron(self.frame_corr(n_frames), self.base_var * np.eye(self.d))

    def frame_eig(self, n_frames: int):
        return _ar1_eig(float(self.rho), int(n_frames))


def _frame_apply(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("fg,...gd->...fd", mat, x)


def posterior_gain(world: GaussianWorld, t, n_frames: int, sched: NoiseSchedule | None = None):
    """Frame-axis matrix ``K`` with ``E[x0|x_t] = mu + K (x_t - alpha mu)``.

    A vector ``t`` yields a stack of matrices, one per entry.
    """
    sched = sched or NoiseSchedule()
    a = np.asarray(sched.alpha(t), dtype=float)[..., None]
    s = np.asarray(sched.sigma(t), dtype=float)[..., None]
    lam, q = world.frame_eig(n_frames)
    v = world.base_var * lam
    g = a * v / (a * a * v + s * s)
    return np.einsum("fk,...k,gk->...fg", q, g, q)


def teacher_x0(
    world: GaussianWorld,
    x_t,
    t,
    c: MultimodalCondition,
    sched: NoiseSchedule | None = None,
    return_flag: bool = False,
):
    """Exact posterior mean E[x0 | x_t, c].

    ``t`` is a scalar or one time per leading batch entry of ``x_t``. At
    ``t = 1`` the observation carries no signal and the result is ``mu_c``;
    pass ``return_flag=True`` to receive ``(x0_hat, degenerate)``.
    """
    sched = sched or NoiseSchedule()
    x_t = np.asarray(x_t, dtype=float)
    n = x_t.shape[-2]
    mu = world.mean(c, n)
    if np.ndim(t) == 0:
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        a, s = float(sched.alpha(t)), float(sched.sigma(t))
        degenerate = a == 0.0
        if s == 0.0:
            out = x_t.copy()
        elif degenerate:
            out = np.broadcast_to(mu, x_t.shape).copy()
        else:
            out = mu + _frame_apply(posterior_gain(world, t, n, sched), x_t - a * mu)
        return (out, degenerate) if return_flag else out
    t = np.asarray(t, dtype=float)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    a = np.asarray(sched.alpha(t), dtype=float)[..., None, None]
    gain = posterior_gain(world, t, n, sched)
    out = mu + np.einsum("...fg,...gd->...fd", gain, x_t - a * mu)
    zero_noise = np.asarray(sched.sigma(t)) == 0.0
    if np.any(zero_noise):
        out[zero_noise] = x_t[zero_noise]
    degenerate = bool(np.any(a == 0.0))
    return (out, degenerate) if return_flag else out


def analytic_score(world: GaussianWorld, x_t, t: float, c: MultimodalCondition, sched=None):
    """grad log p(x_t | c) from the dense marginal covariance (single sample)."""
    sched = sched or NoiseSchedule()
    x_t = np.asarray(x_t, dtype=float)
    n, d = x_t.shape
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    cov = a * a * world.covariance(n) + s * s * np.eye(n * d)
    resid = (x_t - a * world.mean(c, n)).reshape(-1)
    return -np.linalg.solve(cov, resid).reshape(n, d)


def cfg_combine(pred_null, preds: dict, scales: dict) -> np.ndarray:
    """pred_null + sum_m scale_m * (pred_m - pred_null), in x0-space."""
    pred_null = np.asarray(pred_null, dtype=float)
    if set(preds) != set(scales):
        raise ValueError(
            f"need one scale per modality: preds {sorted(preds)} vs scales {sorted(scales)}"
        )
    out = pred_null.copy()
    for m in sorted(preds):
        p = np.asarray(preds[m], dtype=float)
        if p.shape != pred_null.shape:
            raise ValueError(f"shape mismatch for {m!r}: {p.shape} vs {pred_null.shape}")
        out += float(scales[m]) * (p - pred_null)
    return out


def guided_teacher_x0(world, x_t, t, c: MultimodalCondition, scales: dict | None, sched=None):
    """Teacher x0 with per-modality guidance; each ``pred_m`` keeps only modality m.

    ``scales=None`` is the plain conditional teacher. Because the world mean is
    additive across modalities, unit scales on all three reproduce it exactly.
    """
    if scales is None:
        return teacher_x0(world, x_t, t, c, sched)
    null = teacher_x0(world, x_t, t, c.null(), sched)
    preds = {m: teacher_x0(world, x_t, t, c.only(m), sched) for m in scales}
    return cfg_combine(null, preds, scales)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Teacher ODE states ordered from t = 1 (noise) down to t = 0 (clean).

    ``states[j]`` sits at grid time ``times[j] = 1 - j / N``.
    """

    states: np.ndarray
    condition: MultimodalCondition
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.times is None:
            n = self.states.shape[0] - 1
            object.__setattr__(self, "times", np.linspace(1.0, 0.0, n + 1))

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]

    def at_grid_index(self, grid_index: int) -> np.ndarray:
        """State at schedule time ``times[grid_index]`` (ascending grid)."""
        return self.states[self.n_steps - grid_index]


def teacher_ode_rollout(
    world: GaussianWorld,
    c: MultimodalCondition,
    sched: NoiseSchedule,
    z,
    cfg_scales: dict | None = None,
) -> Trajectory:
    """Deterministic N-step integration of the probability-flow ODE from ``z``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-2:] != (c.num_frames, world.d):
        raise ValueError(f"noise shape {z.shape} does not match ({c.num_frames}, {world.d})")
    times = sched.times[::-1]
    states = np.empty((len(times),) + z.shape)
    states[0] = z
    x = z
    for j in range(len(times) - 1):
        x0_hat = guided_teacher_x0(world, x, times[j], c, cfg_scales, sched)
        x = ddim_step(x, x0_hat, times[j], times[j + 1], sched)
        states[j + 1] = x
    return Trajectory(states=states, condition=c, times=times)


def sample_world(world: GaussianWorld, c: MultimodalCondition, rng: np.random.Generator, size=None):
    """Exact draw(s) from N(mu_c, Sigma); ``size`` adds leading batch axes."""
    n = c.num_frames
    mu = world.mean(c, n)
    if world.base_var == 0.0:
        shape = (() if size is None else tuple(np.atleast_1d(size))) + mu.shape
        return np.broadcast_to(mu, shape).copy()
    try:
        chol = np.linalg.cholesky(world.frame_corr(n))
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("world covariance is not positive definite") from exc
    shape = (() if size is None else tuple(np.atleast_1d(size))) + mu.shape
    eps = rng.standard_normal(shape)
    return mu + math.sqrt(world.base_var) * _frame_apply(chol, eps)


def world_block_marginal(world: GaussianWorld, c: MultimodalCondition, j: int, b: int):
    """Mean (flattened) and covariance of block ``j`` under the world."""
    mu = world.mean(c)[j * b : (j + 1) * b].reshape(-1)
    corr = world.frame_corr(c.num_frames)[j * b : (j + 1) * b, j * b : (j + 1) * b]
    return mu, np.kron(corr, world.base_var * np.eye(world.d))
