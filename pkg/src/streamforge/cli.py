"""Command-line entry point: ``streamforge <command> [--preset P] [--config F] [--seed S] [--out D]``.

Commands share one output directory::

    gen-data   -> OUT/data      world, condition bundles, ODE trajectories
    train-ode  -> OUT/ode       student checkpoint, train_log.csv, resume.npz
    train-dmd  -> OUT/dmd       generator / ema / critic checkpoints, train_log.csv
    stream     -> OUT/stream    events.jsonl, report.csv, pixels.lt
    bench      -> OUT/bench     bench.csv (sequential vs pipelined)
    eval       -> OUT/eval      eval.csv (Frechet, sync, exposure gap, drift)
    ablate     -> OUT/ablate    ablation.csv, one train log per arm

Every command writes ``manifest.json`` echoing the resolved configuration.
Reruns with the same configuration and seed are byte-identical, except for
wall-clock timings, which only appear when ``--clock wall`` is requested.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import ltv1
from .cache import AHISCache
from .causal_student import StudentParams
from .condition_pipeline import load_conditions, save_conditions, smooth_audio
from .config import PRESETS, RunConfig, resolve
from .diffusion_core import GaussianWorld, Trajectory
from .distillation import (
    ConvergenceCriterion,
    ODEDataset,
    evaluate_generator,
    exposure_bias_probe,
    init_critic,
    train_dmd,
    train_ode,
)
from .eval_harness import report
from .recipe import ARMS, ablation_csv, build_setup, init_student, ode_dataset, run_ablation, summary_table
from .rng import substream
from .streaming_engine import AudioWindower, StageDelays, identity_drift_probe, make_decoder, run_stream

log = logging.getLogger("streamforge")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_DIVERGED, EXIT_MISSING = 0, 3, 4, 5


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _manifest(out: Path, cfg: RunConfig, command: str, **extra) -> None:
    ltv1.write_manifest(out / "manifest.json", {"command": command, "config": cfg.to_dict(), **extra})


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def save_world(out: Path, world: GaussianWorld) -> None:
    for name in ("M_text", "M_img", "M_audio"):
        ltv1.save(out / f"world.{name}.lt", getattr(world, name))
    ltv1.write_manifest(out / "world.json", {
        "rho": world.rho, "base_var": world.base_var, "F": world.F,
        "img_saturation": world.img_saturation, "audio_saturation": world.audio_saturation,
    })


def load_world(data: Path) -> GaussianWorld:
    meta = ltv1.read_manifest(data / "world.json")
    mats = {n: ltv1.load(data / f"world.{n}.lt").astype(float) for n in ("M_text", "M_img", "M_audio")}
    return GaussianWorld(**mats, **meta)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ckpt.CheckpointError(f"{what} not found at {path}; run the producing command first")
    return path


class Data:
    """Everything ``gen-data`` wrote, reloaded from disk."""

    def __init__(self, data_dir: Path, cfg: RunConfig):
        self.dir = _require(data_dir, "data directory")
        setup = build_setup(cfg)
        saved = load_world(_require(data_dir / "world.json", "world").parent)
        if not np.allclose(saved.M_text, setup.world.M_text, atol=1e-6):
            raise ckpt.CheckpointError(f"{data_dir} was generated with a different seed or world config")
        # float64 world from the seed; the float32 dump is for inspection
        self.world = setup.world
        self.curated, _ = load_conditions(data_dir / "curated")
        self.raw, _ = load_conditions(data_dir / "raw")
        self.select, _ = load_conditions(data_dir / "select")
        self.eval, _ = load_conditions(data_dir / "eval")
        self.sched, self.grid = setup.sched, setup.grid

    def conditions(self, curated: bool):
        return self.curated if curated else self.raw

    def ode_dataset(self, curated: bool, rollouts: int) -> ODEDataset:
        states = ltv1.load(_require(self.dir / f"ode_{'curated' if curated else 'raw'}.lt", "ODE trajectories")).astype(float)
        conds = self.conditions(curated)
        items = []
        for i, c in enumerate(conds):
            for r in range(rollouts):
                items.append((Trajectory(states[i * rollouts + r], c), c))
        return ODEDataset(items, self.sched)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    setup = build_setup(cfg)
    data = out / "data"
    save_world(data, setup.world)
    save_conditions(data / "curated", setup.train_curated)
    save_conditions(data / "raw", setup.train_raw, setup.raw_kinds)
    save_conditions(data / "select", setup.select_conditions)
    save_conditions(data / "eval", setup.eval_conditions)
    counts = {}
    for curated in (True, False):
        ds = ode_dataset(setup, curated)
        states = np.stack([traj.states for traj, _ in ds.items])
        ltv1.save(data / f"ode_{'curated' if curated else 'raw'}.lt", states)
        counts["curated" if curated else "raw"] = len(ds)
    _manifest(data, cfg, "gen-data", trajectories=counts, conditions={
        "curated": len(setup.train_curated), "raw": len(setup.train_raw),
        "select": len(setup.select_conditions), "eval": len(setup.eval_conditions),
    })
    log.info("wrote %s", data)
    return EXIT_OK


def cmd_train_ode(cfg: RunConfig, out: Path, args) -> int:
    data = Data(out / "data", cfg)
    o = cfg.ode
    dest = out / ("ode" if args.curated else "ode_raw")
    dataset = data.ode_dataset(args.curated, o.rollouts_per_condition)
    template = init_student(build_setup(cfg))
    state = ckpt.load_ode_state(dest / "resume.npz", template) if args.resume else None
    try:
        params, tlog = train_ode(
            template, dataset, o.lr, data.grid, ConvergenceCriterion(o.window, o.rel_improvement),
            o.max_steps if args.max_steps is None else args.max_steps, cfg.model.block_size,
            betas=(o.beta1, 0.999), weight_decay=o.weight_decay, state=state, stop_at=args.stop_at,
        )
    except FloatingPointError as exc:
        log.error("ODE training diverged: %s", exc)
        return EXIT_DIVERGED
    ckpt.save_params(dest, "student", params)
    ckpt.save_ode_state(dest / "resume.npz", tlog.state)
    _write(dest / "train_log.csv", tlog.to_csv())
    _manifest(dest, cfg, "train-ode", summary=tlog.summary())
    log.info("ODE stage: %s after %d steps", tlog.stop_reason, tlog.generator_steps)
    return EXIT_OK if tlog.converged else EXIT_NOT_CONVERGED


def cmd_train_dmd(cfg: RunConfig, out: Path, args) -> int:
    data = Data(out / "data", cfg)
    init_dir = Path(args.init) if args.init else out / "ode"
    gen = ckpt.load_params(init_dir, "student")
    dest = out / "dmd"
    dcfg = dataclasses.replace(cfg.dmd, seed=cfg.seed)
    conds = data.conditions(args.curated)
    state = None
    if args.resume:
        critic_t = init_critic(data.world, conds, dcfg, data.grid, data.sched, gen)
        state = ckpt.load_dmd_state(dest / "resume.npz", gen, critic_t)
    try:
        g, best, tlog = train_dmd(gen, None, conds, dcfg, data.world, data.select, data.grid, data.sched,
                                  state=state, stop_at=args.stop_at)
    except FloatingPointError as exc:
        log.error("DMD training aborted: %s", exc)
        return EXIT_DIVERGED
    ckpt.save_params(dest, "generator", g)
    ckpt.save_params(dest, "ema", best)
    ckpt.save_params(dest, "critic", tlog.state.critic)
    ckpt.save_dmd_state(dest / "resume.npz", tlog.state)
    _write(dest / "train_log.csv", tlog.to_csv())
    _manifest(dest, cfg, "train-dmd", summary=tlog.summary(), init=str(init_dir))
    log.info("DMD stage: %s, best eval Frechet %.4f at step %s", tlog.stop_reason, tlog.best_frechet, tlog.best_step)
    return EXIT_OK if tlog.stop_reason == "completed" else EXIT_NOT_CONVERGED


def _checkpoint(out: Path, target: str | None):
    """``DIR/NAME`` or ``DIR`` (defaults to the DMD EMA student)."""
    if target is None:
        return ckpt.load_params(out / "dmd", "ema")
    p = Path(target)
    if (p / "ema.json").exists():
        return ckpt.load_params(p, "ema")
    return ckpt.load_params(p.parent, p.name)


def _stream_audio(cfg: RunConfig, args) -> np.ndarray:
    if args.audio:
        return ltv1.load(args.audio).astype(float).reshape(-1)
    n = cfg.stream.blocks * cfg.model.block_size
    return smooth_audio(substream(cfg.seed, "stream-audio"), n)


def _stream_once(cfg: RunConfig, gen, data: Data, audio, mode: str, clock: str, delays: StageDelays, audio_fps=None):
    s = cfg.stream
    b = cfg.model.block_size
    decoder = None if s.decoder_dim == 0 else make_decoder(cfg.world.d, s.decoder_dim, cfg.seed)
    return run_stream(
        gen, data.eval[0], audio, AHISCache(s.sink_capacity, s.rolling_capacity), mode, delays,
        data.grid, data.sched, decoder, b, AudioWindower(b, s.pre_context, s.look_ahead), clock,
        audio_fps, s.playback_fps, s.handoff_depth, cfg.dmd.sample_mode, cfg.seed,
    )


def cmd_stream(cfg: RunConfig, out: Path, args) -> int:
    data = Data(out / "data", cfg)
    gen = _checkpoint(out, args.checkpoint)
    s = cfg.stream
    clock = args.clock or s.clock
    audio_fps = s.playback_fps if args.realtime else None
    res = _stream_once(cfg, gen, data, _stream_audio(cfg, args), args.mode, clock,
                       StageDelays(s.denoise_delay_s, s.decode_delay_s), audio_fps)
    dest = out / "stream"
    ltv1.save(dest / "pixels.lt", res.pixel_array())
    _write(dest / "events.jsonl", res.event_log())
    _write(dest / "report.csv", res.report.to_csv())
    _manifest(dest, cfg, "stream", mode=args.mode, clock=clock, realtime=bool(args.realtime))
    print(res.report.to_csv(), end="")
    return EXIT_OK


BENCH_COLUMNS = ("mode", "clock", "blocks", "steady_state_period_s", "theory_period_s", "first_frame_latency_s", "throughput_fps", "stall_count")


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    data = Data(out / "data", cfg)
    gen = _checkpoint(out, args.checkpoint)
    s = cfg.stream
    clock = args.clock or s.clock
    delays = StageDelays(s.denoise_delay_s, s.decode_delay_s)
    audio = _stream_audio(cfg, args)
    theory = {"sequential": delays.denoise_s + delays.decode_s, "pipelined": max(delays.denoise_s, delays.decode_s)}
    rows, pixels = [], {}
    for mode in ("sequential", "pipelined"):
        res = _stream_once(cfg, gen, data, audio, mode, clock, delays)
        pixels[mode] = res.pixel_array()
        r = res.report
        rows.append([mode, clock, r.blocks, r.steady_state_period_s, theory[mode], r.first_frame_latency_s, r.throughput_fps, r.stall_count])
    identical = bool(np.array_equal(pixels["sequential"], pixels["pipelined"]))
    speedup = rows[0][3] / rows[1][3] if rows[1][3] > 0 else float("nan")
    lines = [",".join(BENCH_COLUMNS)] + [",".join(_cell(v) for v in row) for row in rows]
    lines.append(f"# speedup={_cell(speedup)} theory={_cell(theory['sequential'] / theory['pipelined'] if theory['pipelined'] else float('nan'))} identical_pixels={int(identical)}")
    text = "\n".join(lines) + "\n"
    dest = out / "bench"
    _write(dest / "bench.csv", text)
    _manifest(dest, cfg, "bench", clock=clock)
    print(text, end="")
    return EXIT_OK if identical else 1


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    data = Data(out / "data", cfg)
    gen = _checkpoint(out, args.checkpoint)
    mode = cfg.dmd.sample_mode
    b = cfg.model.block_size
    res = evaluate_generator(gen, data.world, data.eval, data.grid, data.sched, mode, b)
    nb = cfg.world.F // b
    ex = exposure_bias_probe(gen, data.world, data.eval, nb, data.grid, data.sched, mode, b)
    probe_c = data.eval[0].with_audio(smooth_audio(substream(cfg.seed, "probe-audio"), cfg.stream.probe_blocks * b))
    drift = identity_drift_probe(gen, data.world, probe_c, cfg.stream.probe_blocks, grid=data.grid, sched=data.sched, mode=mode, b=b)
    n = len(data.eval)
    rows = [
        {"method": "student", "metric": "frechet", "value": res.frechet, "n": n, "seed": cfg.seed},
        {"method": "student", "metric": "sync", "value": res.sync, "n": n, "seed": cfg.seed},
        {"method": "student", "metric": "exposure_gap_final", "value": float(ex.gap[-1]), "n": n, "seed": cfg.seed},
    ]
    for label, curve in drift.items():
        rows.append({"method": label, "metric": "drift_final", "value": float(curve[-1]), "n": len(curve), "seed": cfg.seed})
    text = report(rows)
    dest = out / "eval"
    _write(dest / "eval.csv", text)
    _manifest(dest, cfg, "eval", checkpoint=args.checkpoint)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    setup = build_setup(cfg)
    dest = out / "ablate"

    def on_arm(res):
        safe = res.arm.name.replace("+", "plus_")
        _write(dest / f"log_{safe}.csv", res.log.to_csv())
        log.info("arm %s: frechet %.4f", res.arm.name, res.frechet)

    results = run_ablation(setup, ARMS, args.steps, on_arm)
    _write(dest / "ablation.csv", ablation_csv(results, cfg.seed))
    _manifest(dest, cfg, "ablate", arms=[r.arm.name for r in results])
    print(summary_table(results))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ode": cmd_train_ode,
    "train-dmd": cmd_train_dmd,
    "stream": cmd_stream,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file of section.key values")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--preset", choices=PRESETS, default="desk")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="streamforge", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate world, conditions and ODE trajectories")
    for name in ("train-ode", "train-dmd"):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1].upper()} training stage")
        p.add_argument("--resume", action="store_true", help="continue from resume.npz")
        p.add_argument("--stop-at", type=int, help="pause after this many generator steps")
        p.add_argument("--uncurated", dest="curated", action="store_false", help="train on the unfiltered pool")
        if name == "train-ode":
            p.add_argument("--max-steps", type=int)
        else:
            p.add_argument("--init", help="ODE checkpoint directory (default OUT/ode)")
    for name in ("stream", "bench", "eval"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="DIR or DIR/NAME of a student checkpoint (default OUT/dmd/ema)")
        if name != "eval":
            p.add_argument("--clock", choices=("virtual", "wall"))
            p.add_argument("--audio", type=Path, help="LTv1 audio vector (default: generated)")
        if name == "stream":
            p.add_argument("--mode", choices=("sequential", "pipelined"), default="pipelined")
            p.add_argument("--realtime", action="store_true", help="audio arrives at playback rate")
    p = sub.add_parser("ablate", parents=[common], help="run the six-arm recipe ablation")
    p.add_argument("--steps", type=int, help="override DMD steps per arm")
    return parser


def _flag_overrides(args) -> dict:
    flags = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        flags[key.strip()] = value.strip()
    if args.seed is not None:
        flags["seed"] = str(args.seed)
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = resolve(args.preset, args.config, _flag_overrides(args))
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, args.out, args)
    except (ckpt.CheckpointError, ltv1.LTv1Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
