"""Two-stage distillation: ODE-trajectory regression, then on-policy DMD.

Stage one regresses the student onto the teacher's clean endpoints at the k
subsampled timesteps with teacher-forced context. Stage two alternates
critic denoising updates on fresh generator rollouts with generator updates
along ``-(s_teacher - s_critic) * d x0_hat / d phi``.

Deterministic rollouts of the affine student are affine in the injected
noise, so generator statistics used for evaluation are computed exactly
(see :class:`LinearNoise`) rather than by Monte Carlo.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cache import AHISCache, KVEntry
from .causal_student import (
    SamplerGrid,
    StudentParams,
    affine_backward,
    affine_forward,
    few_step_sample_block,
    rollout_backward,
    rollout_video,
)
from .diffusion_core import (
    GaussianWorld,
    MultimodalCondition,
    NoiseSchedule,
    Trajectory,
    guided_teacher_x0,
    sample_world,
    teacher_ode_rollout,
    world_block_marginal,
)
from .eval_harness import GaussianSummary, audio_envelope, gaussian_frechet, sync_metric
from .optim import AdamW, ParamSet, ema_update
from .rng import child_seed, substream


class TrainingDiverged(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# ODE dataset and loss
# --------------------------------------------------------------------------


@dataclass(eq=False)
class ODEDataset:
    items: list  # (Trajectory, MultimodalCondition)
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __len__(self) -> int:
        return len(self.items)

    def groups(self, grid: SamplerGrid):
        """Stack trajectories that share a condition: ``(c, x_at_grid (k,R,F,d), x0 (R,F,d))``."""
        order, by_cond = [], {}
        for traj, c in self.items:
            key = id(c)
            if key not in by_cond:
                by_cond[key] = (c, [])
                order.append(key)
            by_cond[key][1].append(traj)
        out = []
        for key in order:
            c, trajs = by_cond[key]
            xs = np.stack([np.stack([t.at_grid_index(g) for g in grid.indices]) for t in trajs], axis=1)
            x0 = np.stack([t.x0 for t in trajs])
            out.append((c, xs, x0))
        return out


def build_ode_dataset(
    world: GaussianWorld,
    conditions: list,
    sched: NoiseSchedule,
    rollouts_per_condition: int,
    rng: np.random.Generator,
    cfg_scales: dict | None = None,
) -> ODEDataset:
    if not conditions:
        raise ValueError("need at least one condition")
    seed = child_seed(rng)
    items = []
    for ci, c in enumerate(conditions):
        z = np.stack(
            [
                substream(seed, "ode-rollout", ci, r).standard_normal((c.num_frames, world.d))
                for r in range(rollouts_per_condition)
            ]
        )
        traj = teacher_ode_rollout(world, c, sched, z, cfg_scales)
        for r in range(rollouts_per_condition):
            items.append((Trajectory(traj.states[:, r], c, traj.times), c))
    return ODEDataset(items, sched)


def _teacher_forced_pool(x0_blocks: np.ndarray) -> np.ndarray:
    """Mean of all clean frames before each block; zeros for block 0."""
    sums = x0_blocks.sum(axis=-2)  # (..., nb, d)
    before = np.cumsum(sums, axis=-2) - sums
    b = x0_blocks.shape[-2]
    counts = b * np.arange(x0_blocks.shape[-3], dtype=float)
    counts[0] = 1.0
    return before / counts[:, None]


def _ode_terms(params: StudentParams, xs, x0, c: MultimodalCondition, b: int, want_grad: bool = True):
    """Summed squared error over (steps, blocks, batch) and its gradient."""
    n_frames, d = x0.shape[-2:]
    nb = n_frames // b
    x0_blocks = x0.reshape(x0.shape[:-2] + (nb, b, d))
    pool = _teacher_forced_pool(x0_blocks)
    feats = c.frame_features(0, nb * b).reshape(nb, b, -1)
    total = 0.0
    grads = params.zeros_like() if want_grad else None
    for i in range(params.k):
        x = xs[i].reshape(x0_blocks.shape)
        resid = affine_forward(params, i, x, pool, feats) - x0_blocks
        total += float(np.sum(resid * resid))
        if want_grad:
            affine_backward(params, i, x, pool, feats, 2.0 * resid, into=grads)
    count = params.k * nb * int(np.prod(x0.shape[:-2], dtype=int))
    return total, grads, count


def ode_loss(params: StudentParams, traj: Trajectory, c: MultimodalCondition, grid: SamplerGrid, block_size: int = 3):
    """Mean over steps and blocks of ``||g(x_t^b, t, c) - x_0^b||^2`` and its gradient."""
    if params.k != grid.k:
        raise ValueError(f"student has {params.k} steps, grid has {grid.k}")
    if max(grid.indices) > traj.n_steps:
        raise ValueError("grid indices exceed the trajectory grid")
    xs = np.stack([traj.at_grid_index(g) for g in grid.indices])
    total, grads, count = _ode_terms(params, xs, traj.x0, c, block_size)
    scale = 1.0 / count
    return total * scale, grads.from_vector(grads.to_vector() * scale)


def predictor_ode_loss(model, traj: Trajectory, c: MultimodalCondition, grid: SamplerGrid, block_size: int = 3) -> float:
    """ODE loss for any object with ``predict_x0`` (e.g. an oracle student)."""
    b = block_size
    x0 = traj.x0
    nb = x0.shape[-2] // b
    total, count = 0.0, 0
    for i, g in enumerate(grid.indices):
        x_t = traj.at_grid_index(g)
        for j in range(nb):
            ctx = [KVEntry(q, x0[..., q * b : (q + 1) * b, :]) for q in range(j)]
            pred = model.predict_x0(x_t[..., j * b : (j + 1) * b, :], i, ctx, c, j)
            total += float(np.sum((pred - x0[..., j * b : (j + 1) * b, :]) ** 2))
            count += int(np.prod(x0.shape[:-2], dtype=int))
    return total / count


@dataclass
class ConvergenceCriterion:
    window: int = 200
    rel_improvement: float = 1e-3

    def check(self, losses) -> bool:
        w = self.window
        if len(losses) < 2 * w:
            return False
        prev = float(np.mean(losses[-2 * w : -w]))
        cur = float(np.mean(losses[-w:]))
        if prev <= 0.0:
            return True
        return (prev - cur) / prev < self.rel_improvement


LOG_COLUMNS = ("step", "loss_g", "loss_c", "grad_norm_g", "eval_frechet", "eval_sync", "ema_active")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    generator_steps: int = 0
    critic_steps: int = 0
    best_step: int | None = None
    best_frechet: float = math.inf
    peak_then_degrade: bool = False

    def append(self, **row):
        if self.rows and row["step"] < self.rows[-1]["step"]:
            raise ValueError("log steps must be monotone")
        self.rows.append({c: row.get(c, "") for c in LOG_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if r[name] != ""], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in self.rows:
            writer.writerow([_cell(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "converged": self.converged, "stop_reason": self.stop_reason,
            "generator_steps": self.generator_steps, "critic_steps": self.critic_steps,
            "best_step": self.best_step,
            "best_frechet": None if math.isinf(self.best_frechet) else self.best_frechet,
            "peak_then_degrade": self.peak_then_degrade,
        }


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


@dataclass
class ODEState:
    params: StudentParams
    opt: AdamW
    losses: list = field(default_factory=list)
    log: TrainLog = field(default_factory=TrainLog)

    @property
    def step(self) -> int:
        return len(self.losses)


def train_ode(
    params: StudentParams,
    dataset: ODEDataset,
    lr: float,
    grid: SamplerGrid,
    convergence: ConvergenceCriterion | None = None,
    max_steps: int = 20000,
    block_size: int = 3,
    betas=(0.9, 0.999),
    weight_decay: float = 0.0,
    state: ODEState | None = None,
    stop_at: int | None = None,
):
    """Full-batch AdamW on the ODE loss until converged or ``max_steps``.

    Returns ``(params, log)``; ``log.converged`` is True only when the
    windowed relative-improvement test (not the step cap) ended training.
    Pass ``state`` / ``stop_at`` to run in resumable segments; the final
    ``ODEState`` is attached as ``log.state``.
    """
    if not len(dataset):
        raise ValueError("ODE dataset is empty")
    convergence = convergence or ConvergenceCriterion()
    if state is None:
        state = ODEState(params.copy(), AdamW(lr, betas[0], betas[1], 1e-8, weight_decay))
    groups = dataset.groups(grid)
    theta = state.params.to_vector()
    log = state.log
    limit = max_steps if stop_at is None else min(max_steps, stop_at)
    while state.step < limit:
        total, count = 0.0, 0
        grad = np.zeros_like(theta)
        p = state.params
        for c, xs, x0 in groups:
            t, g, n = _ode_terms(p, xs, x0, c, block_size)
            total += t
            count += n
            grad += g.to_vector()
        loss = total / count
        if not math.isfinite(loss):
            log.stop_reason = "diverged"
            raise TrainingDiverged(f"ODE loss became {loss} at step {state.step}")
        grad /= count
        state.losses.append(loss)
        log.append(step=state.step - 1, loss_g=loss, grad_norm_g=float(np.linalg.norm(grad)))
        theta = state.opt.step(theta, grad)
        state.params = p.from_vector(theta)
        if convergence.check(state.losses):
            log.converged = True
            log.stop_reason = "converged"
            break
    else:
        if state.step >= max_steps:
            log.stop_reason = "max_steps"
        else:
            log.stop_reason = "paused"
    log.generator_steps = state.step
    log.state = state
    return state.params, log


# --------------------------------------------------------------------------
# critic
# --------------------------------------------------------------------------


@dataclass(eq=False)
class CriticParams(StudentParams):
    """Non-causal x0-predictor over the whole noisy video.

    Same affine family as the student, with the context read replaced by the
    mean over all frames of ``x_tau`` and one weight set per noise bucket.
    With ``interpolate=True`` weights are blended linearly between adjacent
    bucket centres instead of switching hard at bucket edges.
    """

    tau_lo: float = 0.02
    tau_hi: float = 0.98
    interpolate: bool = True

    @classmethod
    def init(cls, rng=None, n_buckets: int = 8, d: int = 8, d_c: int = 4, tau_range=(0.02, 0.98), interpolate=True, scale=0.0):
        e = 2 * d_c + 1
        rng = rng or np.random.default_rng(0)
        return cls(
            W=rng.normal(0.0, scale, (n_buckets, d, d)) if scale else np.zeros((n_buckets, d, d)),
            V=np.zeros((n_buckets, d, d)),
            U=np.zeros((n_buckets, d, e)),
            bias=np.zeros((n_buckets, d)),
            tau_lo=float(tau_range[0]),
            tau_hi=float(tau_range[1]),
            interpolate=interpolate,
        )

    @property
    def n_buckets(self) -> int:
        return self.W.shape[0]

    def bucket_weights(self, tau) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        q = self.n_buckets
        width = (self.tau_hi - self.tau_lo) / q
        pos = (tau - self.tau_lo) / width
        w = np.zeros((tau.size, q))
        if not self.interpolate:
            idx = np.clip(np.floor(pos).astype(int), 0, q - 1)
            w[np.arange(tau.size), idx] = 1.0
            return w
        centre = np.clip(pos - 0.5, 0.0, q - 1)
        lo = np.floor(centre).astype(int)
        hi = np.minimum(lo + 1, q - 1)
        frac = centre - lo
        np.add.at(w, (np.arange(tau.size), lo), 1.0 - frac)
        np.add.at(w, (np.arange(tau.size), hi), frac)
        return w

    def predict(self, x_tau, tau, c: MultimodalCondition) -> np.ndarray:
        x = np.asarray(x_tau, dtype=float)
        w = self.bucket_weights(tau)
        feats = c.frame_features(0, x.shape[-2])
        pool = x.mean(axis=-2)
        return (
            np.einsum("bfe,bq,qde->bfd", x, w, self.W)
            + np.einsum("be,bq,qde->bd", pool, w, self.V)[:, None, :]
            + np.einsum("fe,bq,qde->bfd", feats, w, self.U)
            + (w @ self.bias)[:, None, :]
        )

    __call__ = predict

    def backward(self, x_tau, tau, c: MultimodalCondition, upstream) -> "CriticParams":
        x = np.asarray(x_tau, dtype=float)
        g = np.asarray(upstream, dtype=float)
        w = self.bucket_weights(tau)
        feats = c.frame_features(0, x.shape[-2])
        pool = x.mean(axis=-2)
        gsum = g.sum(axis=-2)
        return replace_arrays(
            self,
            W=np.einsum("bq,bfd,bfe->qde", w, g, x),
            V=np.einsum("bq,bd,be->qde", w, gsum, pool),
            U=np.einsum("bq,bfd,fe->qde", w, g, feats),
            bias=w.T @ gsum,
        )

    def design_rows(self, x_tau, tau, c: MultimodalCondition) -> np.ndarray:
        """Per-frame regression features so that ``predict == rows @ coef``."""
        x = np.asarray(x_tau, dtype=float)
        B, F, d = x.shape
        w = self.bucket_weights(tau)
        feats = np.broadcast_to(c.frame_features(0, F), (B, F, 2 * self.d_c + 1))
        pool = np.broadcast_to(x.mean(axis=-2)[:, None, :], (B, F, d))
        base = np.concatenate([x, pool, feats, np.ones((B, F, 1))], axis=-1)
        return np.einsum("bq,bfk->bfqk", w, base).reshape(B * F, -1)

    def with_coefficients(self, coef: np.ndarray) -> "CriticParams":
        """Inverse of :meth:`design_rows`: ``coef`` has shape ``(Q * n_feat, d)``."""
        d, e = self.d, 2 * self.d_c + 1
        c3 = coef.reshape(self.n_buckets, 2 * d + e + 1, d)
        return replace_arrays(
            self,
            W=np.transpose(c3[:, :d], (0, 2, 1)).copy(),
            V=np.transpose(c3[:, d : 2 * d], (0, 2, 1)).copy(),
            U=np.transpose(c3[:, 2 * d : 2 * d + e], (0, 2, 1)).copy(),
            bias=c3[:, -1].copy(),
        )


@dataclass(eq=False)
class GaussianCritic(ParamSet):
    """Exact x0-predictor of a Gaussian video distribution with learned moments.

    The modelled distribution is ``N(A_s [c_text; c_img] + A_a audio + b, L L^T)``
    over the flattened ``F * d`` video. Its denoiser is available in closed
    form at every noise level, so there is no bucketing error in tau. Every
    affine student induces a distribution of exactly this form, hence the
    family contains the generator's true denoiser.
    """

    A_s: np.ndarray  # (F d, 2 d_c)
    A_a: np.ndarray  # (F d, F)
    b: np.ndarray  # (F d,)
    L: np.ndarray  # (F d, F d)
    n_frames: int = 21

    FIELDS = ("A_s", "A_a", "b", "L")

    @classmethod
    def from_world(cls, world: GaussianWorld, n_frames: int | None = None) -> "GaussianCritic":
        """Data denoiser of a world with linear responses.

        Saturating worlds are only matched to first order; ``fit_samples``
        corrects the mean map from samples.
        """
        n = world.F if n_frames is None else n_frames
        d, dc = world.d, world.d_c
        A_s = np.tile(np.concatenate([world.M_text, world.M_img], axis=1), (n, 1))
        A_a = np.kron(np.eye(n), world.M_audio[:, None])
        cov = world.covariance(n)
        L = np.linalg.cholesky(cov + 1e-12 * np.eye(n * d)) if world.base_var > 0 else np.zeros((n * d, n * d))
        assert A_s.shape == (n * d, 2 * dc)
        return cls(A_s, A_a, np.zeros(n * d), L, n)

    @property
    def d(self) -> int:
        return self.b.shape[0] // self.n_frames

    @property
    def d_c(self) -> int:
        return self.A_s.shape[1] // 2

    def fit_samples(self, batches, ridge: float = 1e-3) -> "GaussianCritic":
        """Moment fit to ``[(samples (B, F, d), c), ...]``.

        The covariance is the pooled within-condition sample covariance. The
        mean map moves from the current one by the minimum-norm (ridge)
        correction that explains the per-condition sample means.
        """
        feats, resid, centred = [], [], []
        for x, c in batches:
            x = np.asarray(x, dtype=float).reshape(len(x), -1)
            mu = x.mean(axis=0)
            feats.append(np.concatenate([c.text_emb, c.img_emb, c.audio[: self.n_frames], [1.0]]))
            resid.append(mu - self.mean(c))
            centred.append(x - mu)
        X, Y = np.array(feats), np.array(resid)
        delta = X.T @ np.linalg.solve(X @ X.T + ridge * np.eye(len(X)), Y)
        z = np.concatenate(centred)
        dof = max(1, len(z) - len(batches))
        cov = z.T @ z / dof
        lam, Q = np.linalg.eigh(cov)
        L = Q * np.sqrt(np.clip(lam, 0.0, None))
        ns = 2 * self.d_c
        return replace(
            self,
            A_s=self.A_s + delta[:ns].T,
            A_a=self.A_a + delta[ns:-1].T,
            b=self.b + delta[-1],
            L=L,
        )

    def mean(self, c: MultimodalCondition) -> np.ndarray:
        static = np.concatenate([c.text_emb, c.img_emb])
        return self.A_s @ static + self.A_a @ c.audio[: self.n_frames] + self.b

    def eig(self):
        cached = self.__dict__.get("_eig")
        if cached is None:
            lam, Q = np.linalg.eigh(self.L @ self.L.T)
            cached = self.__dict__["_eig"] = (np.clip(lam, 0.0, None), Q)
        return cached

    def _parts(self, x_tau, tau, c):
        x = np.asarray(x_tau, dtype=float)
        B = x.shape[0]
        if x.shape[1:] != (self.n_frames, self.d):
            raise ValueError(f"critic expects (*, {self.n_frames}, {self.d}) videos, got {x.shape}")
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (B,))
        a, s = 1.0 - tau, tau
        lam, Q = self.eig()
        m = self.mean(c)
        r = x.reshape(B, -1) - a[:, None] * m
        inv = 1.0 / (a[:, None] ** 2 * lam + (s * s)[:, None])
        return x, a, s, lam, Q, m, r, inv

    def predict(self, x_tau, tau, c: MultimodalCondition) -> np.ndarray:
        x, a, s, lam, Q, m, r, inv = self._parts(x_tau, tau, c)
        out = m + ((a[:, None] * lam * inv) * (r @ Q)) @ Q.T
        return out.reshape(x.shape)

    __call__ = predict

    def backward(self, x_tau, tau, c: MultimodalCondition, upstream) -> "GaussianCritic":
        x, a, s, lam, Q, m, r, inv = self._parts(x_tau, tau, c)
        g = np.asarray(upstream, dtype=float).reshape(r.shape)
        Pg = ((g @ Q) * inv) @ Q.T
        Pr = ((r @ Q) * inv) @ Q.T
        G = (Pg * (s * s * a)[:, None]).T @ Pr
        dm = (s * s)[:, None] * Pg
        dm_sum = dm.sum(axis=0)
        static = np.concatenate([c.text_emb, c.img_emb])
        return replace(
            self,
            A_s=np.outer(dm_sum, static),
            A_a=np.outer(dm_sum, c.audio[: self.n_frames]),
            b=dm_sum,
            L=(G + G.T) @ self.L,
        )


def replace_arrays(params, **arrays):
    out = params.copy()
    for k, v in arrays.items():
        setattr(out, k, v)
    return out


def critic_loss_and_grad(critic, x0_hat, x_tau, tau, c: MultimodalCondition):
    """Mean over the batch of ``||s_psi(x_tau, tau, c) - x0_hat||^2``."""
    resid = critic.predict(x_tau, tau, c) - x0_hat
    B = resid.shape[0]
    loss = float(np.sum(resid * resid)) / B
    return loss, critic.backward(x_tau, tau, c, 2.0 * resid / B)


def fit_critic_least_squares(critic: CriticParams, batches, ridge: float = 1e-10) -> CriticParams:
    """Exact minimiser of the summed critic loss over ``[(x0, x_tau, tau, c), ...]``."""
    rows, targets = [], []
    for x0, x_tau, tau, c in batches:
        rows.append(critic.design_rows(x_tau, tau, c))
        targets.append(np.asarray(x0, dtype=float).reshape(-1, critic.d))
    X = np.concatenate(rows)
    Y = np.concatenate(targets)
    gram = X.T @ X
    coef = np.linalg.lstsq(gram + ridge * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0]), X.T @ Y, rcond=None)[0]
    return critic.with_coefficients(coef)


def draw_noise_level(x0_hat, cfg, rng: np.random.Generator, sched: NoiseSchedule):
    lo, hi = cfg.tau_range
    B = x0_hat.shape[0]
    tau = rng.uniform(lo, hi, B)
    eps = rng.standard_normal(x0_hat.shape)
    a = np.asarray(sched.alpha(tau))[:, None, None]
    s = np.asarray(sched.sigma(tau))[:, None, None]
    return tau, a * x0_hat + s * eps


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class DMDConfig:
    """DMD hyperparameters; the defaults are the full-scale values.

    ``toy()`` swaps in learning rates and an audio guidance scale tuned for the
    desk-scale Gaussian world; the critic and generator share one rate there.
    """

    lr_generator: float = 4e-6
    lr_critic: float = 8e-7
    update_ratio: int = 5
    ratio_direction: str = "critic_per_generator"
    critic_warmup: int = 20
    ema_decay: float = 0.99
    ema_start: int = 200
    teacher_cfg_scale: float = 6.0
    cfg_modality: str = "audio"
    tau_range: tuple = (0.02, 0.98)
    batch_size: int = 64
    conds_per_step: int = 8
    total_steps: int = 1000
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    normalize_score_diff: bool = False
    n_critic_buckets: int = 8
    critic_interpolate: bool = True
    critic_kind: str = "gaussian"
    critic_batch_size: int = 512
    critic_init: str = "generator"
    critic_init_samples: int = 256
    eval_every: int = 25
    eval_conditions: int = 4
    degrade_tolerance: float = 0.05
    sample_mode: str = "stochastic"
    block_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")
        if self.update_ratio < 1:
            raise ValueError("update_ratio must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.critic_kind not in ("gaussian", "affine"):
            raise ValueError(f"unknown critic_kind {self.critic_kind!r}")
        if self.critic_init not in ("world", "generator"):
            raise ValueError(f"unknown critic_init {self.critic_init!r}")
        if self.sample_mode not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown sample_mode {self.sample_mode!r}")
        if self.ratio_direction not in ("critic_per_generator", "generator_per_critic"):
            raise ValueError(f"unknown ratio_direction {self.ratio_direction!r}")
        lo, hi = self.tau_range
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("tau_range must satisfy 0 < lo < hi < 1")
        self.tau_range = (float(lo), float(hi))

    @classmethod
    def toy(cls, **overrides) -> "DMDConfig":
        base = dict(lr_generator=4e-3, lr_critic=4e-3, teacher_cfg_scale=1.5, total_steps=200)
        base.update(overrides)
        return cls(**base)

    def guidance_scales(self) -> dict:
        scales = {"text": 1.0, "img": 1.0, "audio": 1.0}
        scales[self.cfg_modality] = float(self.teacher_cfg_scale)
        return scales

    def as_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# exact generator statistics
# --------------------------------------------------------------------------


class LinearNoise:
    """Stand-in RNG whose draws span the noise space basis.

    Row 0 of every draw is zero and row ``1 + k`` is the k-th unit vector of
    the concatenated noise. Feeding it to an affine sampler with batch size
    ``total + 1`` yields the map's offset (row 0) and Jacobian (rows - row 0).
    """

    def __init__(self, total_dims: int):
        self.total = int(total_dims)
        self.offset = 0
        self.batch = self.total + 1

    def standard_normal(self, shape):
        shape = tuple(shape)
        if shape[0] != self.batch:
            raise ValueError(f"expected leading batch {self.batch}, got {shape}")
        n = int(np.prod(shape[1:], dtype=int))
        if self.offset + n > self.total:
            raise ValueError("noise basis exhausted")
        out = np.zeros((self.batch, n))
        out[1 + self.offset + np.arange(n), np.arange(n)] = 1.0
        self.offset += n
        return out.reshape(shape)


def noise_dims(num_blocks: int, b: int, d: int, k: int, mode: str) -> int:
    per_block = b * d * (k if mode == "stochastic" else 1)
    return num_blocks * per_block


def generator_moments(model, c: MultimodalCondition, num_blocks: int, grid: SamplerGrid, sched: NoiseSchedule, cache=None, mode="deterministic", b=3, d=None):
    """Exact mean ``(F, d)`` and Jacobian ``(n_noise, F, d)`` of a rollout."""
    d = d if d is not None else (model.d if hasattr(model, "d") else model.world.d)
    k = grid.k
    noise = LinearNoise(noise_dims(num_blocks, b, d, k, mode))
    video = rollout_video(model, c, num_blocks, cache, grid, sched, noise, mode, batch_shape=(noise.batch,), block_size=b)
    mean = video[0]
    return mean, video[1:] - mean


def moments_summary(mean, jac) -> GaussianSummary:
    J = jac.reshape(jac.shape[0], -1)
    return GaussianSummary(mean.reshape(-1), J.T @ J)


def motion_rms(mean, jac) -> np.ndarray:
    dm = np.diff(mean, axis=-2)
    dj = np.diff(jac, axis=-2)
    return np.sqrt(np.sum(dm * dm, axis=-1) + np.sum(dj * dj, axis=(0, 2)))


@dataclass
class EvalResult:
    frechet: float
    sync: float
    per_condition: list = field(default_factory=list)


def evaluate_generator(model, world: GaussianWorld, conditions, grid: SamplerGrid, sched: NoiseSchedule, mode="deterministic", b=3, max_offset=3) -> EvalResult:
    """Mean exact Frechet distance to the world and mean audio/motion sync confidence."""
    fds, syncs = [], []
    for c in conditions:
        nb = c.num_frames // b
        mean, jac = generator_moments(model, c, nb, grid, sched, None, mode, b, world.d)
        fd = gaussian_frechet(moments_summary(mean, jac), GaussianSummary(world.mean(c).reshape(-1), world.covariance(c.num_frames)))
        fds.append(fd)
        motion = motion_rms(mean, jac)
        # short clips cannot support the full offset search
        syncs.append(sync_metric(audio_envelope(c.audio[: nb * b]), motion, min(max_offset, (len(motion) - 1) // 2)).confidence)
    return EvalResult(float(np.mean(fds)), float(np.mean(syncs)), list(zip(fds, syncs)))


# --------------------------------------------------------------------------
# DMD steps
# --------------------------------------------------------------------------


def _as_predictor(critic):
    if isinstance(critic, (CriticParams, GaussianCritic)):
        return critic.predict
    if callable(critic):
        return critic
    raise TypeError("critic must be CriticParams or a callable (x_tau, tau, c) -> x0")


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    finite: bool = True


def dmd_generator_grad(gen: StudentParams, critic, world: GaussianWorld, c: MultimodalCondition, cfg: DMDConfig, rng, grid: SamplerGrid, sched: NoiseSchedule, batch: int | None = None, teacher=None):
    """Generator gradient for one condition; returns ``(grads, mean squared score gap)``.

    ``teacher`` overrides the guided exact teacher with any ``(x_tau, tau, c)``
    callable.
    """
    b = cfg.block_size
    nb = c.num_frames // b
    B = batch or cfg.batch_size
    try:
        video, tape = rollout_video(gen, c, nb, None, grid, sched, rng, cfg.sample_mode, batch_shape=(B,), block_size=b, record=True)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"generator rollout is non-finite (mode-collapse suspect): {exc}") from exc
    tau, x_tau = draw_noise_level(video, cfg, rng, sched)
    if teacher is None:
        s_real = guided_teacher_x0(world, x_tau, tau, c, cfg.guidance_scales(), sched)
    else:
        s_real = teacher(x_tau, tau, c)
    s_fake = _as_predictor(critic)(x_tau, tau, c)
    diff = s_real - s_fake
    if cfg.normalize_score_diff:
        scale = np.mean(np.abs(diff), axis=(-2, -1), keepdims=True)
        diff = diff / np.where(scale > 0, scale, 1.0)
    grads = rollout_backward(gen, tape, -diff / B)
    return grads, float(np.mean(diff * diff))


def dmd_generator_step(gen, ema, critic, world, c, cfg: DMDConfig, rng, grid=None, sched=None, opt: AdamW | None = None, step: int = 0):
    """One generator update; returns ``(gen, ema, StepInfo)``.

    ``c`` may be a single condition or a list (gradients are averaged).
    """
    grid = grid or SamplerGrid()
    sched = sched or NoiseSchedule(grid.n_teacher_steps)
    conds = c if isinstance(c, (list, tuple)) else [c]
    per = max(1, cfg.batch_size // len(conds))
    total = None
    gaps = []
    for ci in conds:
        g, gap = dmd_generator_grad(gen, critic, world, ci, cfg, rng, grid, sched, per)
        total = g.to_vector() if total is None else total + g.to_vector()
        gaps.append(gap)
    grad = total / len(conds)
    opt = opt or AdamW(cfg.lr_generator, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    new = gen.from_vector(opt.step(gen.to_vector(), grad))
    if not new.is_finite():
        raise TrainingDiverged("generator parameters became non-finite")
    if ema is not None:
        ema = ema_update(ema, new, cfg.ema_decay) if step >= cfg.ema_start else new.copy()
    return new, ema, StepInfo(float(np.mean(gaps)), float(np.linalg.norm(grad)))


def dmd_critic_step(critic, x0_hat, c, cfg: DMDConfig, rng, sched=None, opt: AdamW | None = None):
    """One critic update on frozen rollouts; returns ``(critic, StepInfo)``.

    ``x0_hat`` / ``c`` may be lists of per-condition rollout batches.
    """
    sched = sched or NoiseSchedule()
    xs = x0_hat if isinstance(x0_hat, (list, tuple)) else [x0_hat]
    cs = c if isinstance(c, (list, tuple)) else [c]
    total, losses = None, []
    for x, ci in zip(xs, cs):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise TrainingDiverged("critic received non-finite rollouts")
        tau, x_tau = draw_noise_level(x, cfg, rng, sched)
        loss, g = critic_loss_and_grad(critic, x, x_tau, tau, ci)
        losses.append(loss)
        total = g.to_vector() if total is None else total + g.to_vector()
    grad = total / len(xs)
    opt = opt or AdamW(cfg.lr_critic, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    new = critic.from_vector(opt.step(critic.to_vector(), grad))
    return new, StepInfo(float(np.mean(losses)), float(np.linalg.norm(grad)))


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass(eq=False)
class DMDState:
    gen: StudentParams
    ema: StudentParams
    critic: CriticParams
    gen_opt: AdamW
    critic_opt: AdamW
    best: StudentParams
    generator_steps: int = 0
    critic_steps: int = 0
    log: TrainLog = field(default_factory=TrainLog)


def init_critic(world: GaussianWorld, conditions, cfg: DMDConfig, grid: SamplerGrid, sched: NoiseSchedule, gen: StudentParams):
    """Initial critic, fitted in closed form before the warmup steps.

    ``critic_init="world"`` starts from the data denoiser, the analogue of
    initialising the fake score from the pretrained teacher.
    ``critic_init="generator"`` instead fits it to rollouts of the initial
    generator, so the warmup only has to track subsequent drift.
    """
    n_frames = conditions[0].num_frames
    nb = n_frames // cfg.block_size
    per = max(2, cfg.critic_init_samples)
    draws = []
    for ci, c in enumerate(conditions):
        rng = substream(cfg.seed, "critic-init", ci)
        if cfg.critic_init == "world":
            x0 = sample_world(world, c, rng, per)
        else:
            x0 = rollout_video(gen, c, nb, None, grid, sched, rng, cfg.sample_mode, batch_shape=(per,), block_size=cfg.block_size)
        draws.append((x0, c, rng))
    if cfg.critic_kind == "gaussian":
        return GaussianCritic.from_world(world, n_frames).fit_samples([(x0, c) for x0, c, _ in draws])
    critic = CriticParams.init(None, cfg.n_critic_buckets, world.d, gen.d_c, cfg.tau_range, cfg.critic_interpolate)
    batches = []
    for x0, c, rng in draws:
        tau, x_tau = draw_noise_level(x0, cfg, rng, sched)
        batches.append((x0, x_tau, tau, c))
    return fit_critic_least_squares(critic, batches)


def _pick_conditions(conditions, n, rng):
    idx = rng.choice(len(conditions), size=min(n, len(conditions)), replace=False)
    return [conditions[i] for i in sorted(idx)]


def _critic_update(state: DMDState, conditions, cfg, grid, sched):
    rng = substream(cfg.seed, "critic", state.critic_steps)
    conds = _pick_conditions(conditions, cfg.conds_per_step, rng)
    per = max(1, cfg.critic_batch_size // len(conds))
    rollouts = []
    for c in conds:
        nb = c.num_frames // cfg.block_size
        rollouts.append(rollout_video(state.gen, c, nb, None, grid, sched, rng, cfg.sample_mode, batch_shape=(per,), block_size=cfg.block_size))
    state.critic, info = dmd_critic_step(state.critic, rollouts, conds, cfg, rng, sched, state.critic_opt)
    state.critic_steps += 1
    return info


def train_dmd(
    gen: StudentParams,
    critic: CriticParams | None,
    conditions,
    cfg: DMDConfig,
    world: GaussianWorld,
    eval_conditions=None,
    grid: SamplerGrid | None = None,
    sched: NoiseSchedule | None = None,
    state: DMDState | None = None,
    stop_at: int | None = None,
):
    """Critic warmup, then ``update_ratio`` critic steps per generator step.

    Returns ``(gen, best_ema, log)``. The EMA tracks the generator from
    ``cfg.ema_start`` on (before that it equals the raw parameters). Every
    ``eval_every`` generator steps the EMA is scored on ``eval_conditions``
    and the best one is retained; ``log.peak_then_degrade`` is set when the
    final score is worse than the best by more than ``degrade_tolerance``.
    """
    grid = grid or SamplerGrid()
    sched = sched or NoiseSchedule(grid.n_teacher_steps)
    conditions = list(conditions)
    if not conditions:
        raise ValueError("need training conditions")
    eval_conditions = list(eval_conditions or conditions[: cfg.eval_conditions])
    if state is None:
        if critic is None:
            critic = init_critic(world, conditions, cfg, grid, sched, gen)
        state = DMDState(
            gen=gen.copy(), ema=gen.copy(), critic=critic.copy(),
            gen_opt=AdamW(cfg.lr_generator, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay),
            critic_opt=AdamW(cfg.lr_critic, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay),
            best=gen.copy(),
        )
    log = state.log

    def evaluate(step):
        res = evaluate_generator(state.ema, world, eval_conditions, grid, sched, cfg.sample_mode, cfg.block_size)
        if res.frechet < log.best_frechet:
            log.best_frechet, log.best_step = res.frechet, step
            state.best = state.ema.copy()
        return res

    if state.generator_steps == 0 and state.critic_steps == 0:
        res = evaluate(0)
        log.append(step=0, eval_frechet=res.frechet, eval_sync=res.sync, ema_active=False)
        for _ in range(cfg.critic_warmup):
            _critic_update(state, conditions, cfg, grid, sched)

    limit = cfg.total_steps if stop_at is None else min(cfg.total_steps, stop_at)
    critic_per_gen = cfg.update_ratio if cfg.ratio_direction == "critic_per_generator" else 1
    gen_per_critic = 1 if cfg.ratio_direction == "critic_per_generator" else cfg.update_ratio
    while state.generator_steps < limit:
        loss_c = float("nan")
        for _ in range(critic_per_gen):
            loss_c = _critic_update(state, conditions, cfg, grid, sched).loss
        info = None
        for _ in range(gen_per_critic):
            if state.generator_steps >= limit:
                break
            rng = substream(cfg.seed, "generator", state.generator_steps)
            conds = _pick_conditions(conditions, cfg.conds_per_step, rng)
            state.gen, state.ema, info = dmd_generator_step(
                state.gen, state.ema, state.critic, world, conds, cfg, rng, grid, sched,
                state.gen_opt, step=state.generator_steps,
            )
            state.generator_steps += 1
        step = state.generator_steps
        row = dict(step=step, loss_g=info.loss, loss_c=loss_c, grad_norm_g=info.grad_norm, ema_active=step > cfg.ema_start)
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            res = evaluate(step)
            row.update(eval_frechet=res.frechet, eval_sync=res.sync)
        log.append(**row)

    log.generator_steps = state.generator_steps
    log.critic_steps = state.critic_steps
    finals = log.column("eval_frechet")
    if finals.size:
        log.peak_then_degrade = bool(finals[-1] > log.best_frechet * (1.0 + cfg.degrade_tolerance))
    log.stop_reason = "completed" if state.generator_steps >= cfg.total_steps else "paused"
    log.state = state
    return state.gen, state.best, log


# --------------------------------------------------------------------------
# exposure bias
# --------------------------------------------------------------------------


@dataclass
class ExposureCurves:
    teacher_forced: np.ndarray
    self_rollout: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.self_rollout - self.teacher_forced


def exposure_bias_probe(gen, world: GaussianWorld, conditions, num_blocks: int, grid: SamplerGrid, sched: NoiseSchedule, mode="deterministic", b=3) -> ExposureCurves:
    """Per-block Frechet distance to the world's block marginal under two contexts.

    Teacher-forced: earlier blocks are exact world samples. Self-rollout:
    earlier blocks are the model's own outputs. Both are computed exactly
    from the affine noise maps and averaged over ``conditions``.
    """
    d = world.d
    k = grid.k
    tf = np.zeros(num_blocks)
    sr = np.zeros(num_blocks)
    for c in conditions:
        mean, jac = generator_moments(gen, c, num_blocks, grid, sched, None, mode, b, d)
        n_frames = c.num_frames
        per_block = b * d * (k if mode == "stochastic" else 1)
        for j in range(num_blocks):
            mu_w, cov_w = world_block_marginal(world, c, j, b)
            world_g = GaussianSummary(mu_w, cov_w)
            blk = slice(j * b, (j + 1) * b)
            sr[j] += gaussian_frechet(moments_summary(mean[blk], jac[:, blk]), world_g)
            noise = LinearNoise(n_frames * d + per_block)
            prefix = sample_world(world, c, noise, noise.batch)
            ctx = [KVEntry(q, prefix[:, q * b : (q + 1) * b]) for q in range(j)]
            block, _ = few_step_sample_block(gen, c, ctx, grid, sched, noise, mode, j, (noise.batch,), b, d)
            tf[j] += gaussian_frechet(moments_summary(block[0], block[1:] - block[0]), world_g)
    n = len(conditions)
    return ExposureCurves(tf / n, sr / n)
