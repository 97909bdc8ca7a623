"""Checkpoints: LTv1 float32 parameter dumps plus a float64 resume sidecar.

The LTv1 files are the portable artifact. Resuming must continue the exact
trajectory of an uninterrupted run, so optimizer moments, counters and the
log are stored at full precision in ``resume.npz``.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from . import ltv1
from .causal_student import StudentParams
from .distillation import CriticParams, DMDState, GaussianCritic, ODEState, TrainLog
from .optim import AdamW

_PARAM_KINDS = {"StudentParams": StudentParams, "CriticParams": CriticParams, "GaussianCritic": GaussianCritic}


class CheckpointError(FileNotFoundError):
    pass


def save_params(out_dir, name: str, params) -> None:
    out_dir = Path(out_dir)
    for f in params.FIELDS:
        ltv1.save(out_dir / f"{name}.{f}.lt", getattr(params, f))
    meta = {"kind": type(params).__name__, "fields": list(params.FIELDS)}
    if isinstance(params, GaussianCritic):
        meta["n_frames"] = params.n_frames
    ltv1.write_manifest(out_dir / f"{name}.json", meta)


def load_params(in_dir, name: str):
    in_dir = Path(in_dir)
    meta_path = in_dir / f"{name}.json"
    if not meta_path.exists():
        raise CheckpointError(f"no checkpoint named {name!r} in {in_dir}")
    meta = ltv1.read_manifest(meta_path)
    arrays = {f: ltv1.load(in_dir / f"{name}.{f}.lt").astype(float) for f in meta["fields"]}
    cls = _PARAM_KINDS[meta["kind"]]
    extra = {"n_frames": meta["n_frames"]} if "n_frames" in meta else {}
    return cls(**arrays, **extra)


def _pack_params(prefix: str, params, out: dict) -> None:
    out[f"{prefix}/vector"] = params.to_vector()


def _unpack_params(prefix: str, template, data):
    return template.from_vector(data[f"{prefix}/vector"])


def _pack_opt(prefix: str, opt: AdamW, out: dict) -> None:
    st = opt.state_dict()
    out[f"{prefix}/scalars"] = np.array([st["lr"], st["beta1"], st["beta2"], st["eps"], st["weight_decay"], st["t"]], dtype=float)
    if st["m"] is not None:
        out[f"{prefix}/m"] = st["m"]
        out[f"{prefix}/v"] = st["v"]


def _unpack_opt(prefix: str, data) -> AdamW:
    lr, b1, b2, eps, wd, t = data[f"{prefix}/scalars"]
    has = f"{prefix}/m" in data
    return AdamW.from_state({
        "lr": lr, "beta1": b1, "beta2": b2, "eps": eps, "weight_decay": wd, "t": int(t),
        "m": data[f"{prefix}/m"] if has else None, "v": data[f"{prefix}/v"] if has else None,
    })


def _log_to_json(log: TrainLog) -> str:
    payload = dict(log.summary(), rows=log.rows)
    payload["best_frechet"] = None if not np.isfinite(log.best_frechet) else log.best_frechet
    return json.dumps(payload, sort_keys=True)


def _log_from_json(text: str) -> TrainLog:
    p = json.loads(text)
    log = TrainLog(rows=p["rows"], converged=p["converged"], stop_reason=p["stop_reason"],
                   generator_steps=p["generator_steps"], critic_steps=p["critic_steps"],
                   best_step=p["best_step"], peak_then_degrade=p["peak_then_degrade"])
    log.best_frechet = np.inf if p["best_frechet"] is None else p["best_frechet"]
    return log


def _savez(path, arrays: dict) -> None:
    """``np.savez`` with fixed zip timestamps so reruns are byte-identical."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[key]), allow_pickle=False)


def save_ode_state(path, state: ODEState) -> None:
    out = {"losses": np.asarray(state.losses, dtype=float), "log": np.array(_log_to_json(state.log))}
    _pack_params("params", state.params, out)
    _pack_opt("opt", state.opt, out)
    _savez(path, out)


def load_ode_state(path, template: StudentParams) -> ODEState:
    if not Path(path).exists():
        raise CheckpointError(f"missing resume state {path}")
    with np.load(path) as data:
        return ODEState(
            params=_unpack_params("params", template, data),
            opt=_unpack_opt("opt", data),
            losses=[float(v) for v in data["losses"]],
            log=_log_from_json(str(data["log"])),
        )


def save_dmd_state(path, state: DMDState) -> None:
    out = {
        "counters": np.array([state.generator_steps, state.critic_steps], dtype=np.int64),
        "log": np.array(_log_to_json(state.log)),
    }
    for name in ("gen", "ema", "best", "critic"):
        _pack_params(name, getattr(state, name), out)
    _pack_opt("gen_opt", state.gen_opt, out)
    _pack_opt("critic_opt", state.critic_opt, out)
    _savez(path, out)


def load_dmd_state(path, gen_template: StudentParams, critic_template) -> DMDState:
    if not Path(path).exists():
        raise CheckpointError(f"missing resume state {path}")
    with np.load(path) as data:
        g, c = (int(v) for v in data["counters"])
        return DMDState(
            gen=_unpack_params("gen", gen_template, data),
            ema=_unpack_params("ema", gen_template, data),
            critic=_unpack_params("critic", critic_template, data),
            gen_opt=_unpack_opt("gen_opt", data),
            critic_opt=_unpack_opt("critic_opt", data),
            best=_unpack_params("best", gen_template, data),
            generator_steps=g,
            critic_steps=c,
            log=_log_from_json(str(data["log"])),
        )
