"""End-to-end recipe: world and condition setup, both training stages, and
the ablation matrix whose rows add one recipe component at a time."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .causal_student import SamplerGrid, StudentParams
from .condition_pipeline import Degradation, Thresholds, curated_conditions, generate_conditions
from .config import RunConfig
from .diffusion_core import GaussianWorld, NoiseSchedule
from .distillation import (
    ConvergenceCriterion,
    DMDConfig,
    build_ode_dataset,
    evaluate_generator,
    train_dmd,
    train_ode,
)
from .rng import substream


@dataclass(eq=False)
class Setup:
    cfg: RunConfig
    world: GaussianWorld
    sched: NoiseSchedule
    grid: SamplerGrid
    train_curated: list
    train_raw: list
    raw_kinds: list
    select_conditions: list
    eval_conditions: list

    def conditions(self, curated: bool) -> list:
        return self.train_curated if curated else self.train_raw


def make_world(cfg: RunConfig) -> GaussianWorld:
    w = cfg.world
    return GaussianWorld.random(
        substream(cfg.seed, "world"), d=w.d, d_c=w.d_c, F=w.F, rho=w.rho, base_var=w.base_var,
        audio_gain=w.audio_gain, img_saturation=w.img_saturation, audio_saturation=w.audio_saturation,
    )


def degradation(cfg: RunConfig) -> Degradation:
    c = cfg.conditions
    return Degradation(c.clean_fraction, c.dim_fraction, c.noisy_fraction)


def thresholds(cfg: RunConfig) -> Thresholds:
    return Thresholds(brightness=cfg.conditions.min_brightness, audio_snr=cfg.conditions.min_audio_snr)


def build_setup(cfg: RunConfig) -> Setup:
    """Everything derived from the master seed before any training.

    The raw pool mixes clean and degraded conditions; the curated pool is
    what survives the quality filter when drawing from the same source.
    Checkpoint selection and final evaluation use two disjoint sets of
    held-out clean conditions.
    """
    w, cc = cfg.world, cfg.conditions
    deg = degradation(cfg)
    raw, kinds = generate_conditions(substream(cfg.seed, "train"), cc.n_train, deg, w.F, w.d_c)
    curated = curated_conditions(substream(cfg.seed, "train"), cc.n_train, deg, thresholds(cfg), w.F, w.d_c)
    select, _ = generate_conditions(substream(cfg.seed, "select"), cc.n_select, Degradation(), w.F, w.d_c)
    evalc, _ = generate_conditions(substream(cfg.seed, "eval"), cc.n_eval, Degradation(), w.F, w.d_c)
    sched = NoiseSchedule(cfg.model.n_teacher_steps)
    grid = SamplerGrid.uniform(cfg.model.k, cfg.model.n_teacher_steps)
    return Setup(cfg, make_world(cfg), sched, grid, curated, raw, kinds, select, evalc)


def init_student(setup: Setup) -> StudentParams:
    m, w = setup.cfg.model, setup.cfg.world
    return StudentParams.init(substream(setup.cfg.seed, "student-init"), m.k, w.d, w.d_c, m.init_scale)


def ode_dataset(setup: Setup, curated: bool = True):
    o = setup.cfg.ode
    scales = None if o.teacher_cfg_scale == 1.0 else {"text": 1.0, "img": 1.0, "audio": o.teacher_cfg_scale}
    return build_ode_dataset(
        setup.world, setup.conditions(curated), setup.sched, o.rollouts_per_condition,
        substream(setup.cfg.seed, "ode-data", int(curated)), scales,
    )


def run_ode(setup: Setup, curated: bool = True, max_steps: int | None = None, dataset=None):
    o = setup.cfg.ode
    dataset = dataset or ode_dataset(setup, curated)
    return train_ode(
        init_student(setup), dataset, o.lr, setup.grid, ConvergenceCriterion(o.window, o.rel_improvement),
        o.max_steps if max_steps is None else max_steps, setup.cfg.model.block_size,
        betas=(o.beta1, 0.999), weight_decay=o.weight_decay,
    )


def under_trained_steps(converged_steps: int, fraction: float) -> int:
    return max(1, int(round(fraction * converged_steps)))


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Arm:
    name: str
    curated: bool
    converged_ode: bool
    aggressive_lr: bool
    tuned_cfg: bool


ARMS = (
    Arm("baseline", False, False, False, False),
    Arm("+curated", True, False, False, False),
    Arm("+converged_ode", True, True, False, False),
    Arm("+aggressive_lr", True, True, True, False),
    Arm("+tuned_cfg", True, True, True, True),
    Arm("final_without_curation", False, True, True, True),
)

# Same as "+converged_ode" but trained on the unfiltered pool.
DEGRADED_CONTROL = Arm("converged_ode_degraded", False, True, False, False)


def arm_dmd_config(base: DMDConfig, arm: Arm, seed: int) -> DMDConfig:
    """The configured DMD settings are the full recipe; arms back off from them.

    Without the aggressive schedule both learning rates are halved; without
    tuned guidance the teacher CFG scale is the baseline ratio 4/6 of it.
    """
    lr_scale = 1.0 if arm.aggressive_lr else 0.5
    cfg_scale = base.teacher_cfg_scale if arm.tuned_cfg else base.teacher_cfg_scale * 4.0 / 6.0
    return dataclasses.replace(
        base, lr_generator=base.lr_generator * lr_scale, lr_critic=base.lr_critic * lr_scale,
        teacher_cfg_scale=cfg_scale, seed=seed,
    )


@dataclass
class ArmResult:
    arm: Arm
    frechet: float
    sync: float
    ode_frechet: float
    ode_steps: int
    ode_converged: bool
    best_step: int | None
    peak_then_degrade: bool
    log: object = field(default=None, repr=False)
    student: object = field(default=None, repr=False)
    ode_student: object = field(default=None, repr=False)


class ODECache:
    """Shares ODE stages between arms; the under-trained student stops at a
    fixed fraction of the converged run's step count."""

    def __init__(self, setup: Setup):
        self.setup = setup
        self._runs = {}

    def get(self, curated: bool, converged: bool):
        key = (curated, converged)
        if key not in self._runs:
            if converged:
                self._runs[key] = run_ode(self.setup, curated)
            else:
                conv_params, conv_log = self.get(curated, True)
                steps = under_trained_steps(conv_log.generator_steps, self.setup.cfg.ode.under_trained_fraction)
                self._runs[key] = run_ode(self.setup, curated, max_steps=steps)
        return self._runs[key]


def run_arm(setup: Setup, arm: Arm, odes: ODECache | None = None, total_steps: int | None = None) -> ArmResult:
    odes = odes or ODECache(setup)
    ode_params, ode_log = odes.get(arm.curated, arm.converged_ode)
    cfg = arm_dmd_config(setup.cfg.dmd, arm, setup.cfg.seed)
    if total_steps is not None:
        cfg = dataclasses.replace(cfg, total_steps=total_steps)
    _, best, log = train_dmd(
        ode_params, None, setup.conditions(arm.curated), cfg, setup.world, setup.select_conditions,
        setup.grid, setup.sched,
    )
    final = evaluate_generator(best, setup.world, setup.eval_conditions, setup.grid, setup.sched, cfg.sample_mode, cfg.block_size)
    ode_eval = evaluate_generator(ode_params, setup.world, setup.eval_conditions, setup.grid, setup.sched, cfg.sample_mode, cfg.block_size)
    return ArmResult(
        arm, final.frechet, final.sync, ode_eval.frechet, ode_log.generator_steps, ode_log.converged,
        log.best_step, log.peak_then_degrade, log, best, ode_params,
    )


def run_ablation(setup: Setup, arms=ARMS, total_steps: int | None = None, on_arm=None) -> list:
    odes = ODECache(setup)
    results = []
    for arm in arms:
        res = run_arm(setup, arm, odes, total_steps)
        results.append(res)
        if on_arm is not None:
            on_arm(res)
    return results


ABLATION_COLUMNS = ("arm", "frechet", "sync", "ode_frechet", "ode_steps", "ode_converged", "dmd_steps", "best_step", "peak_then_degrade", "seed")


def ablation_rows(results, seed: int) -> list:
    """Long-format rows for :func:`report` (method, metric, value, n, seed)."""
    rows = []
    for r in results:
        n = r.log.generator_steps
        rows.append({"method": r.arm.name, "metric": "frechet", "value": r.frechet, "n": n, "seed": seed})
        rows.append({"method": r.arm.name, "metric": "sync", "value": r.sync, "n": n, "seed": seed})
        rows.append({"method": r.arm.name, "metric": "ode_frechet", "value": r.ode_frechet, "n": r.ode_steps, "seed": seed})
    return rows


def ablation_csv(results, seed: int) -> str:
    """One row per arm."""
    lines = [",".join(ABLATION_COLUMNS)]
    for r in results:
        cells = (r.arm.name, repr(float(r.frechet)), repr(float(r.sync)), repr(float(r.ode_frechet)), r.ode_steps,
                 int(r.ode_converged), r.log.generator_steps, "" if r.best_step is None else r.best_step,
                 int(r.peak_then_degrade), seed)
        lines.append(",".join(str(c) for c in cells))
    return "\n".join(lines) + "\n"


def summary_table(results) -> str:
    lines = [f"{'arm':<24}{'frechet':>10}{'sync':>8}{'ode_fd':>9}{'ode_steps':>11}"]
    for r in results:
        lines.append(f"{r.arm.name:<24}{r.frechet:>10.3f}{r.sync:>8.3f}{r.ode_frechet:>9.3f}{r.ode_steps:>11d}")
    return "\n".join(lines)


def eval_frechet(setup: Setup, params) -> float:
    return evaluate_generator(params, setup.world, setup.eval_conditions, setup.grid, setup.sched).frechet


__all__ = [
    "Setup", "build_setup", "make_world", "init_student", "ode_dataset", "run_ode", "under_trained_steps",
    "Arm", "ARMS", "DEGRADED_CONTROL", "arm_dmd_config", "ArmResult", "ODECache", "run_arm",
    "run_ablation", "ABLATION_COLUMNS", "ablation_rows", "ablation_csv", "summary_table", "eval_frechet",
]
