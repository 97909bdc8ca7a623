"""Block-causal few-step generator.

Per sampler step ``i`` and frame ``f`` of the current block::

    x0_hat[f] = W_i x_t[f] + V_i pool(context) + U_i [c_text; c_img; audio[f]] + bias_i

where ``pool`` is the mean over every frame held in the context (zero when
the context is empty). Gradients are derived by hand; ``rollout_backward``
pushes an upstream gradient on the finished video back through the sampler
chain and through the context reads into earlier blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cache import AHISCache, KVEntry
from .diffusion_core import GaussianWorld, MultimodalCondition, NoiseSchedule, ddim_step
from .optim import ParamSet


class CausalityError(ValueError):
    """A block tried to read context from itself or from the future."""


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(eq=False)
class StudentParams(ParamSet):
    W: np.ndarray  # (k, d, d)
    V: np.ndarray  # (k, d, d)
    U: np.ndarray  # (k, d, 2 d_c + 1)
    bias: np.ndarray  # (k, d)

    FIELDS = ("W", "V", "U", "bias")

    @classmethod
    def init(cls, rng: np.random.Generator, k: int = 4, d: int = 8, d_c: int = 4, scale: float = 0.1):
        e = 2 * d_c + 1
        return cls(
            W=rng.normal(0.0, scale / math.sqrt(d), (k, d, d)),
            V=rng.normal(0.0, scale / math.sqrt(d), (k, d, d)),
            U=rng.normal(0.0, scale / math.sqrt(e), (k, d, e)),
            bias=np.zeros((k, d)),
        )

    @classmethod
    def zeros(cls, k: int = 4, d: int = 8, d_c: int = 4):
        return cls(np.zeros((k, d, d)), np.zeros((k, d, d)), np.zeros((k, d, 2 * d_c + 1)), np.zeros((k, d)))

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def d_c(self) -> int:
        return (self.U.shape[2] - 1) // 2

    def predict_x0(self, x_t_block, step_index, context, c, block_index):
        return student_predict_x0(self, x_t_block, step_index, context, c, block_index)

    def manifest(self) -> dict:
        return {"kind": type(self).__name__, "k": self.k, "d": self.d, "d_c": self.d_c}


# --------------------------------------------------------------------------
# sampler grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerGrid:
    """Few-step timesteps as indices into the teacher's ascending time grid."""

    indices: tuple = (48, 36, 24, 12)
    n_teacher_steps: int = 48

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise ValueError("sampler grid needs at least one step")
        if idx[0] != self.n_teacher_steps:
            raise ValueError("the first sampler step must be t = 1 (pure noise)")
        if any(b >= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"sampler indices must be strictly descending, got {idx}")
        if idx[-1] < 1:
            raise ValueError("sampler indices must lie in 1..N")

    @classmethod
    def uniform(cls, k: int = 4, n_teacher_steps: int = 48):
        if n_teacher_steps % k:
            raise ValueError(f"k={k} does not divide N={n_teacher_steps}")
        stride = n_teacher_steps // k
        return cls(tuple(n_teacher_steps - i * stride for i in range(k)), n_teacher_steps)

    @property
    def k(self) -> int:
        return len(self.indices)

    def times(self, sched: NoiseSchedule) -> np.ndarray:
        if sched.n_steps != self.n_teacher_steps:
            raise ValueError(
                f"grid built for N={self.n_teacher_steps}, schedule has N={sched.n_steps}"
            )
        return sched.times[list(self.indices)]


# --------------------------------------------------------------------------
# forward / backward of one prediction
# --------------------------------------------------------------------------


def pool_context(context, lead_shape=(), d=None) -> np.ndarray:
    """Mean over all frames of all context entries; zeros when empty."""
    if not context:
        return np.zeros(tuple(lead_shape) + (d,))
    feats = [np.asarray(e.feature, dtype=float) for e in context]
    total = sum(f.sum(axis=-2) for f in feats)
    return total / sum(f.shape[-2] for f in feats)


def affine_forward(params: StudentParams, i: int, x, pool, feats) -> np.ndarray:
    """Core map on arrays: ``x (..., b, d)``, ``pool (..., d)``, ``feats (..., b, e)``."""
    return (
        x @ params.W[i].T
        + (pool @ params.V[i].T)[..., None, :]
        + feats @ params.U[i].T
        + params.bias[i]
    )


@dataclass(eq=False)
class StudentGrads:
    params: StudentParams
    x_t: np.ndarray
    pool: np.ndarray


def affine_backward(params: StudentParams, i: int, x, pool, feats, upstream, into: StudentParams | None = None):
    """Gradients of ``sum(upstream * affine_forward(...))``."""
    g = np.asarray(upstream, dtype=float)
    grads = params.zeros_like() if into is None else into
    gf = g.reshape(-1, g.shape[-1])
    grads.W[i] += gf.T @ np.broadcast_to(x, g.shape).reshape(-1, x.shape[-1])
    gsum = g.sum(axis=-2)
    grads.V[i] += gsum.reshape(-1, g.shape[-1]).T @ np.broadcast_to(pool, gsum.shape[:-1] + pool.shape[-1:]).reshape(-1, pool.shape[-1])
    feats_b = np.broadcast_to(feats, g.shape[:-1] + feats.shape[-1:])
    grads.U[i] += gf.T @ feats_b.reshape(-1, feats.shape[-1])
    grads.bias[i] += gf.sum(axis=0)
    dx = g @ params.W[i]
    dpool = gsum @ params.V[i]
    return grads, dx, dpool


def _check_causal(context, block_index: int):
    for e in context:
        if e.block_index >= block_index:
            raise CausalityError(
                f"block {block_index} cannot read context from block {e.block_index}"
            )


def student_predict_x0(params: StudentParams, x_t_block, step_index: int, context, c: MultimodalCondition, block_index: int):
    if not 0 <= step_index < params.k:
        raise ValueError(f"step_index {step_index} outside 0..{params.k - 1}")
    _check_causal(context, block_index)
    x = np.asarray(x_t_block, dtype=float)
    b = x.shape[-2]
    pool = pool_context(context, x.shape[:-2], params.d)
    feats = c.frame_features(block_index * b, (block_index + 1) * b)
    return affine_forward(params, step_index, x, pool, feats)


def student_backward(params: StudentParams, x_t_block, step_index: int, context, c: MultimodalCondition, block_index: int, upstream) -> StudentGrads:
    """Exact gradients of ``sum(upstream * student_predict_x0(...))``.

    Returns parameter gradients, the gradient w.r.t. ``x_t_block`` and the
    gradient w.r.t. the pooled context vector.
    """
    _check_causal(context, block_index)
    x = np.asarray(x_t_block, dtype=float)
    b = x.shape[-2]
    pool = pool_context(context, x.shape[:-2], params.d)
    feats = c.frame_features(block_index * b, (block_index + 1) * b)
    grads, dx, dpool = affine_backward(params, step_index, x, pool, feats, upstream)
    return StudentGrads(grads, dx, dpool)


# --------------------------------------------------------------------------
# exact causal oracles
# --------------------------------------------------------------------------


class OracleStudent:
    """Causal stand-in built from the exact world.

    The block's conditional law given the clean context frames is Gaussian;
    ``kind="posterior"`` returns its posterior mean (the teacher's x0), and
    ``kind="flow"`` returns the exact probability-flow endpoint through
    ``x_t`` (what a perfectly ODE-distilled student would output).
    """

    def __init__(self, world: GaussianWorld, grid: SamplerGrid, sched: NoiseSchedule, kind: str = "posterior"):
        if kind not in ("posterior", "flow"):
            raise ValueError(f"unknown oracle kind {kind!r}")
        self.world, self.grid, self.sched, self.kind = world, grid, sched, kind
        self.times = grid.times(sched)
        self.k = grid.k

    def conditional(self, context, c: MultimodalCondition, block_index: int, b: int):
        """Mean ``(..., b, d)`` and frame covariance ``(b, b)`` of the block given context."""
        w = self.world
        frames = np.arange(block_index * b, (block_index + 1) * b)
        mu = w.mean(c)
        mu_j = mu[frames]
        if not context:
            corr = w.frame_corr(c.num_frames)
            return mu_j, w.base_var * corr[np.ix_(frames, frames)]
        ctx_frames = np.concatenate(
            [np.arange(e.block_index * b, (e.block_index + 1) * b) for e in context]
        )
        x_c = np.concatenate([np.asarray(e.feature, dtype=float) for e in context], axis=-2)
        n = max(frames[-1], ctx_frames.max()) + 1
        corr = w.frame_corr(n)
        r_jc = corr[np.ix_(frames, ctx_frames)]
        r_cc = corr[np.ix_(ctx_frames, ctx_frames)]
        gain = np.linalg.solve(r_cc, r_jc.T).T
        mean = mu_j + np.einsum("jc,...cd->...jd", gain, x_c - mu[ctx_frames])
        cov = w.base_var * (corr[np.ix_(frames, frames)] - gain @ r_jc.T)
        return mean, 0.5 * (cov + cov.T)

    def predict_x0(self, x_t_block, step_index, context, c, block_index):
        _check_causal(context, block_index)
        x = np.asarray(x_t_block, dtype=float)
        b = x.shape[-2]
        t = float(self.times[step_index])
        a, s = float(self.sched.alpha(t)), float(self.sched.sigma(t))
        mean, cov = self.conditional(context, c, block_index, b)
        lam, q = np.linalg.eigh(cov)
        lam = np.clip(lam, 0.0, None)
        denom = a * a * lam + s * s
        if self.kind == "posterior":
            g = np.divide(a * lam, denom, out=np.zeros_like(lam), where=denom > 0)
        else:
            g = np.divide(np.sqrt(lam), np.sqrt(denom), out=np.ones_like(lam), where=denom > 0)
        gain = (q * g) @ q.T
        return mean + np.einsum("fg,...gd->...fd", gain, x - a * mean)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass(eq=False)
class BlockTape:
    block_index: int
    context_blocks: tuple
    context_frames: int
    feats: np.ndarray
    pool: np.ndarray
    xs: list = field(default_factory=list)  # x_t fed to each step
    x0s: list = field(default_factory=list)  # prediction of each step


def few_step_sample_block(
    params,
    c: MultimodalCondition,
    context,
    grid: SamplerGrid,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mode: str = "deterministic",
    block_index: int | None = None,
    batch_shape=(),
    block_size: int = 3,
    d: int | None = None,
):
    """Run the k-step sampler on one block starting from pure noise.

    Returns ``(clean_block, intermediates)`` where intermediates lists
    ``(x_t, x0_hat)`` for each step. ``block_index`` defaults to one past the
    newest context block.
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if block_index is None:
        block_index = 1 + max((e.block_index for e in context), default=-1)
    if d is None:
        d = params.d if hasattr(params, "d") else params.world.d
    times = grid.times(sched)
    x = rng.standard_normal(tuple(batch_shape) + (block_size, d))
    steps = []
    x0 = None
    if isinstance(params, StudentParams):
        _check_causal(context, block_index)
        pool = pool_context(context, tuple(batch_shape), d)
        feats = c.frame_features(block_index * block_size, (block_index + 1) * block_size)

        def predict(x, i):
            return affine_forward(params, i, x, pool, feats)
    else:

        def predict(x, i):
            return params.predict_x0(x, i, context, c, block_index)

    for i in range(grid.k):
        x0 = predict(x, i)
        steps.append((x, x0))
        if i + 1 < grid.k:
            t, t_next = times[i], times[i + 1]
            if mode == "deterministic":
                x = ddim_step(x, x0, t, t_next, sched)
            else:
                x = float(sched.alpha(t_next)) * x0 + float(sched.sigma(t_next)) * rng.standard_normal(x.shape)
    return x0, steps


def _tape_block(params: StudentParams, c, context, grid, sched, rng, mode, block_index, batch_shape, b):
    """Student sampler that also records everything the backward pass needs."""
    _check_causal(context, block_index)
    times = grid.times(sched)
    feats = c.frame_features(block_index * b, (block_index + 1) * b)
    pool = pool_context(context, batch_shape, params.d)
    tape = BlockTape(
        block_index,
        tuple(e.block_index for e in context),
        sum(np.asarray(e.feature).shape[-2] for e in context),
        feats,
        pool,
    )
    x = rng.standard_normal(tuple(batch_shape) + (b, params.d))
    x0 = None
    for i in range(grid.k):
        x0 = affine_forward(params, i, x, pool, feats)
        tape.xs.append(x)
        tape.x0s.append(x0)
        if i + 1 < grid.k:
            t, t_next = times[i], times[i + 1]
            if mode == "deterministic":
                x = ddim_step(x, x0, t, t_next, sched)
            else:
                x = float(sched.alpha(t_next)) * x0 + float(sched.sigma(t_next)) * rng.standard_normal(x.shape)
    return x0, tape


@dataclass(eq=False)
class RolloutTape:
    grid: SamplerGrid
    sched: NoiseSchedule
    mode: str
    block_size: int
    blocks: list


def rollout_video(
    params,
    c: MultimodalCondition,
    num_blocks: int,
    cache: AHISCache | None,
    grid: SamplerGrid,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mode: str = "deterministic",
    batch_shape=(),
    block_size: int = 3,
    record: bool = False,
    on_block=None,
):
    """Generate ``num_blocks`` blocks in order, feeding clean outputs back as context.

    ``cache=None`` means unbounded context. With ``record=True`` (student
    parameters only) returns ``(video, RolloutTape)`` for ``rollout_backward``.
    ``on_block(j, context, block)`` is called after each block is produced.
    """
    b = block_size
    if c.num_frames < num_blocks * b:
        raise ValueError(
            f"audio has {c.num_frames} frames but {num_blocks} blocks need {num_blocks * b}"
        )
    cache = AHISCache.unbounded() if cache is None else cache
    d = params.d if hasattr(params, "d") else params.world.d
    out = np.empty(tuple(batch_shape) + (num_blocks * b, d))
    tapes = []
    for j in range(num_blocks):
        context = cache.context()
        if record:
            block, tape = _tape_block(params, c, context, grid, sched, rng, mode, j, batch_shape, b)
            tapes.append(tape)
        else:
            block, _ = few_step_sample_block(
                params, c, context, grid, sched, rng, mode, block_index=j,
                batch_shape=batch_shape, block_size=b, d=d,
            )
        if not np.all(np.isfinite(block)):
            raise FloatingPointError(f"non-finite latents in block {j}")
        out[..., j * b : (j + 1) * b, :] = block
        if on_block is not None:
            on_block(j, context, block)
        cache.insert(KVEntry(j, block))
    if record:
        return out, RolloutTape(grid, sched, mode, b, tapes)
    return out


def rollout_backward(params: StudentParams, tape: RolloutTape, upstream, through_context: bool = True) -> StudentParams:
    """Parameter gradient of ``sum(upstream * video)`` for a recorded rollout."""
    b = tape.block_size
    times = tape.grid.times(tape.sched)
    sched = tape.sched
    upstream = np.asarray(upstream, dtype=float)
    grads = params.zeros_like()
    g_out = [upstream[..., j * b : (j + 1) * b, :].copy() for j in range(len(tape.blocks))]
    for bt in reversed(tape.blocks):
        g_x0 = g_out[bt.block_index]
        dpool_total = 0.0
        dx_carry = None
        for i in reversed(range(len(bt.xs))):
            _, dx, dpool = affine_backward(params, i, bt.xs[i], bt.pool, bt.feats, g_x0, into=grads)
            dpool_total = dpool_total + dpool
            if dx_carry is not None:
                dx = dx + dx_carry
            if i == 0:
                break
            t, t_next = times[i - 1], times[i]
            a, s = float(sched.alpha(t)), float(sched.sigma(t))
            a2, s2 = float(sched.alpha(t_next)), float(sched.sigma(t_next))
            if tape.mode == "deterministic":
                # x_i = (a2 - s2 a / s) x0_{i-1} + (s2 / s) x_{i-1}
                g_x0 = (a2 - s2 * a / s) * dx
                dx_carry = (s2 / s) * dx
            else:
                g_x0 = a2 * dx
                dx_carry = None
        if through_context and bt.context_blocks:
            share = dpool_total / bt.context_frames
            for idx in bt.context_blocks:
                g_out[idx] += share[..., None, :]
    return grads
