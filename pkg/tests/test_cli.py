"""Command-line pipeline, checkpoints and the recipe helpers on the smoke preset."""

import time
from pathlib import Path

import numpy as np
import pytest

from streamforge import checkpoint as ckpt
from streamforge.causal_student import StudentParams
from streamforge.cli import EXIT_DIVERGED, EXIT_MISSING, EXIT_NOT_CONVERGED, EXIT_OK, main
from streamforge.config import preset
from streamforge.distillation import CriticParams, DMDConfig, GaussianCritic
from streamforge.eval_harness import read_report
from streamforge.recipe import ABLATION_COLUMNS, ARMS, DEGRADED_CONTROL, arm_dmd_config, build_setup, under_trained_steps
from streamforge.rng import substream

PIPELINE = ("gen-data", "train-ode", "train-dmd", "eval", "bench", "stream")


def run(cmd, out, *extra):
    return main([cmd, "--preset", "smoke", "--out", str(out), *extra])


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    start = time.perf_counter()
    codes = {cmd: run(cmd, out) for cmd in PIPELINE}
    return out, codes, time.perf_counter() - start


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def test_smoke_pipeline_runs_quickly(smoke_run):
    out, codes, elapsed = smoke_run
    assert codes == {cmd: EXIT_OK for cmd in PIPELINE}
    assert elapsed < 60.0
    for rel in ("data/world.json", "ode/student.json", "ode/train_log.csv", "dmd/ema.json", "dmd/train_log.csv",
                "eval/eval.csv", "bench/bench.csv", "stream/pixels.lt", "stream/events.jsonl", "stream/report.csv"):
        assert (out / rel).is_file(), rel
    for sub in ("data", "ode", "dmd", "eval", "bench", "stream"):
        assert (out / sub / "manifest.json").is_file()


def test_eval_csv_contents(smoke_run):
    out, _, _ = smoke_run
    rows = read_report((out / "eval" / "eval.csv").read_text())
    metrics = {(r["method"], r["metric"]) for r in rows}
    assert {("student", "frechet"), ("student", "sync"), ("student", "exposure_gap_final")} <= metrics
    assert {("ahis(3,2)", "drift_final"), ("sliding(0,5)", "drift_final"), ("unbounded", "drift_final")} <= metrics


def test_bench_speedup(smoke_run):
    out, _, _ = smoke_run
    lines = (out / "bench" / "bench.csv").read_text().splitlines()
    seq, pipe = (line.split(",") for line in lines[1:3])
    assert seq[0] == "sequential" and pipe[0] == "pipelined"
    assert abs(float(seq[3]) - 0.05) <= 0.15 * 0.05 and abs(float(pipe[3]) - 0.03) <= 0.15 * 0.03
    meta = dict(kv.split("=") for kv in lines[3].lstrip("# ").split())
    assert abs(float(meta["speedup"]) - 5 / 3) <= 0.15 * 5 / 3 and meta["identical_pixels"] == "1"


def test_reruns_are_byte_identical(smoke_run):
    out, _, _ = smoke_run
    before = snapshot(out)
    for cmd in PIPELINE:
        assert run(cmd, out) == EXIT_OK
    after = snapshot(out)
    assert before.keys() == after.keys()
    assert [k for k in before if before[k] != after[k]] == []


def test_seed_changes_outputs(smoke_run, tmp_path):
    out, _, _ = smoke_run
    assert run("gen-data", tmp_path, "--seed", "1") == EXIT_OK
    assert (tmp_path / "data" / "world.M_text.lt").read_bytes() != (out / "data" / "world.M_text.lt").read_bytes()


# --------------------------------------------------------------------------
# exit codes and resume
# --------------------------------------------------------------------------


def test_missing_inputs_exit_code(tmp_path, capsys):
    assert run("train-ode", tmp_path) == EXIT_MISSING
    assert run("eval", tmp_path) == EXIT_MISSING
    assert "error:" in capsys.readouterr().err


def test_data_from_other_seed_is_rejected(smoke_run, tmp_path):
    out, _, _ = smoke_run
    assert run("train-ode", out, "--seed", "3", "--max-steps", "2") == EXIT_MISSING


def test_missing_checkpoint_for_dmd(smoke_run, tmp_path):
    out, _, _ = smoke_run
    assert run("train-dmd", out, "--init", str(tmp_path / "nowhere")) == EXIT_MISSING


def test_under_trained_ode_exit_code(smoke_run, tmp_path):
    out, _, _ = smoke_run
    assert run("gen-data", tmp_path) == EXIT_OK
    assert run("train-ode", tmp_path, "--max-steps", "10") == EXIT_NOT_CONVERGED


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_ode_exit_code(tmp_path):
    assert run("gen-data", tmp_path) == EXIT_OK
    assert run("train-ode", tmp_path, "--set", "ode.lr=1e200", "--max-steps", "50") == EXIT_DIVERGED


def test_ode_resume_matches_uninterrupted(smoke_run, tmp_path):
    out, _, _ = smoke_run
    assert run("gen-data", tmp_path) == EXIT_OK
    assert run("train-ode", tmp_path, "--stop-at", "300") == EXIT_NOT_CONVERGED
    assert run("train-ode", tmp_path, "--resume") == EXIT_OK
    full, resumed = snapshot(out / "ode"), snapshot(tmp_path / "ode")
    for name in ("student.W.lt", "student.bias.lt", "train_log.csv", "resume.npz"):
        assert full[name] == resumed[name], name


def test_dmd_resume_matches_uninterrupted(smoke_run, tmp_path):
    out, _, _ = smoke_run
    assert run("gen-data", tmp_path) == EXIT_OK
    assert run("train-ode", tmp_path) == EXIT_OK
    assert run("train-dmd", tmp_path, "--stop-at", "7") == EXIT_NOT_CONVERGED
    assert run("train-dmd", tmp_path, "--resume") == EXIT_OK
    full, resumed = snapshot(out / "dmd"), snapshot(tmp_path / "dmd")
    for name in ("generator.W.lt", "ema.W.lt", "critic.L.lt", "train_log.csv", "resume.npz"):
        assert full[name] == resumed[name], name


def test_resume_without_state(tmp_path):
    assert run("gen-data", tmp_path) == EXIT_OK
    assert run("train-ode", tmp_path, "--resume") == EXIT_MISSING


def test_ablate_writes_six_arms(tmp_path):
    assert run("ablate", tmp_path, "--steps", "2") == EXIT_OK
    lines = (tmp_path / "ablate" / "ablation.csv").read_text().splitlines()
    assert lines[0] == ",".join(ABLATION_COLUMNS)
    assert [line.split(",")[0] for line in lines[1:]] == [a.name for a in ARMS]
    assert len(list((tmp_path / "ablate").glob("log_*.csv"))) == 6


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["student", "affine_critic", "gaussian_critic"])
def test_param_checkpoint_round_trip(tmp_path, small_world, kind):
    rng = substream(0, "ckpt")
    params = {
        "student": StudentParams.init(rng, 4, 3, 2, 0.5),
        "affine_critic": CriticParams.init(rng, 4, 3, 2, scale=0.5),
        "gaussian_critic": GaussianCritic.from_world(small_world),
    }[kind]
    ckpt.save_params(tmp_path, "p", params)
    back = ckpt.load_params(tmp_path, "p")
    assert type(back) is type(params)
    assert np.array_equal(back.to_vector(), params.to_vector().astype(np.float32).astype(float))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_params(tmp_path, "q")


# --------------------------------------------------------------------------
# recipe helpers
# --------------------------------------------------------------------------


def test_arms_add_one_component_at_a_time():
    assert [a.name for a in ARMS] == ["baseline", "+curated", "+converged_ode", "+aggressive_lr", "+tuned_cfg", "final_without_curation"]
    fields = ("curated", "converged_ode", "aggressive_lr", "tuned_cfg")
    for prev, cur in zip(ARMS[:5], ARMS[1:5]):
        assert sum(getattr(prev, f) != getattr(cur, f) for f in fields) == 1
    assert DEGRADED_CONTROL.converged_ode and not DEGRADED_CONTROL.curated


def test_arm_config_back_off():
    base = DMDConfig.toy()
    full = arm_dmd_config(base, ARMS[4], 3)
    assert (full.lr_generator, full.teacher_cfg_scale, full.seed) == (base.lr_generator, base.teacher_cfg_scale, 3)
    plain = arm_dmd_config(base, ARMS[0], 3)
    assert plain.lr_generator == base.lr_generator / 2 and plain.lr_critic == base.lr_critic / 2
    assert np.isclose(plain.teacher_cfg_scale, base.teacher_cfg_scale * 4 / 6)


def test_under_trained_steps():
    assert under_trained_steps(1000, 0.05) == 50
    assert under_trained_steps(3, 0.05) == 1


def test_setup_splits_are_disjoint_and_seeded():
    cfg = preset("smoke")
    a, b = build_setup(cfg), build_setup(cfg)
    assert all(x.equals(y) for x, y in zip(a.eval_conditions, b.eval_conditions))
    ids = {c.audio.tobytes() for c in a.select_conditions}
    assert not ids & {c.audio.tobytes() for c in a.eval_conditions}
    assert len(a.train_curated) == cfg.conditions.n_train
