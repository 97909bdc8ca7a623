"""ODE regression, critics, DMD updates, the training loop and probes."""

import numpy as np
import pytest

from streamforge.causal_student import OracleStudent, SamplerGrid, StudentParams, rollout_video
from streamforge.condition_pipeline import make_condition
from streamforge.diffusion_core import GaussianWorld, MultimodalCondition, guided_teacher_x0
from streamforge.distillation import (
    ConvergenceCriterion,
    CriticParams,
    DMDConfig,
    GaussianCritic,
    LinearNoise,
    TrainLog,
    TrainingDiverged,
    build_ode_dataset,
    critic_loss_and_grad,
    dmd_critic_step,
    dmd_generator_grad,
    dmd_generator_step,
    draw_noise_level,
    evaluate_generator,
    exposure_bias_probe,
    fit_critic_least_squares,
    generator_moments,
    noise_dims,
    ode_loss,
    predictor_ode_loss,
    train_dmd,
    train_ode,
)
from streamforge.rng import substream


def directional_check(f, grad, theta, rng, n=100, h=1e-4):
    """Worst relative error of ``grad . v`` against central differences."""
    worst = 0.0
    for _ in range(n):
        v = rng.normal(size=theta.shape)
        fd = (f(theta + h * v) - f(theta - h * v)) / (2 * h)
        worst = max(worst, abs(fd - grad @ v) / max(abs(fd), 1e-12))
    return worst


@pytest.fixture
def small_setup(small_world, sched):
    conds = [make_condition(substream(i, "small-c"), "clean", 6, 2) for i in range(4)]
    ds = build_ode_dataset(small_world, conds, sched, 4, substream(0, "small-ds"))
    return small_world, conds, ds


@pytest.fixture
def small_student():
    return StudentParams.init(substream(1, "small-student"), 4, 3, 2, 0.3)


def tiny_dmd(**kw):
    base = dict(batch_size=16, critic_batch_size=32, conds_per_step=2, critic_init_samples=32, eval_every=2, eval_conditions=2, critic_warmup=3, update_ratio=2, total_steps=4)
    base.update(kw)
    return DMDConfig.toy(**base)


# --------------------------------------------------------------------------
# ODE regression
# --------------------------------------------------------------------------


def test_ode_loss_gradient(small_setup, small_student, grid):
    _, conds, ds = small_setup
    traj, c = ds.items[0]
    _, g = ode_loss(small_student, traj, c, grid)
    f = lambda th: ode_loss(small_student.from_vector(th), traj, c, grid)[0]
    assert directional_check(f, g.to_vector(), small_student.to_vector(), np.random.default_rng(0)) <= 1e-4


def test_ode_loss_hand_value(small_setup, grid):
    _, _, ds = small_setup
    traj, c = ds.items[0]
    loss, g = ode_loss(StudentParams.zeros(4, 3, 2), traj, c, grid)
    # zero student predicts zero: the loss is the mean squared clean block norm
    assert np.isclose(loss, np.sum(traj.x0**2) / 2)
    assert np.allclose(g.bias, -2 * traj.x0.reshape(2, 3, 3).sum(axis=(0, 1)) / (4 * 2) * np.ones((4, 1)))


def test_ode_loss_rejects_mismatched_grid(small_setup, small_student, sched):
    _, _, ds = small_setup
    traj, c = ds.items[0]
    with pytest.raises(ValueError):
        ode_loss(small_student, traj, c, SamplerGrid((48, 24)))


def test_flow_oracle_fits_single_block_trajectories(small_world, grid, sched):
    # with one block the oracle's flow map is the teacher ODE; only Euler error remains
    conds = [make_condition(substream(i, "one-block"), "clean", 3, 2) for i in range(3)]
    ds = build_ode_dataset(small_world, conds, sched, 4, substream(0, "one-block-ds"))
    oracle = OracleStudent(small_world, grid, sched, "flow")
    for traj, c in ds.items[::4]:
        assert predictor_ode_loss(oracle, traj, c, grid) <= 1e-3 * ode_loss(StudentParams.zeros(4, 3, 2), traj, c, grid)[0]


def test_predictor_loss_agrees_with_ode_loss(small_setup, small_student, grid):
    _, _, ds = small_setup
    traj, c = ds.items[1]
    assert np.isclose(predictor_ode_loss(small_student, traj, c, grid), ode_loss(small_student, traj, c, grid)[0])


def test_convergence_criterion():
    crit = ConvergenceCriterion(window=2, rel_improvement=0.1)
    assert not crit.check([4.0, 3.0, 2.0])
    assert not crit.check([4.0, 4.0, 2.0, 2.0])
    assert crit.check([2.0, 2.0, 1.95, 1.95])
    assert crit.check([0.0, 0.0, 0.0, 0.0])


def test_train_ode_converges(small_setup, small_student, grid):
    _, _, ds = small_setup
    _, log = train_ode(small_student, ds, 0.05, grid, ConvergenceCriterion(50, 1e-3), 5000)
    losses = log.column("loss_g")
    assert log.converged and log.stop_reason == "converged"
    assert log.generator_steps == len(losses) < 5000
    assert losses[-1] < 0.05 * losses[0]


def test_train_ode_under_trained_flag(small_setup, small_student, grid):
    _, _, ds = small_setup
    _, log = train_ode(small_student, ds, 0.05, grid, ConvergenceCriterion(50, 1e-3), 30)
    assert not log.converged and log.stop_reason == "max_steps" and log.generator_steps == 30


def test_train_ode_resume_equals_uninterrupted(small_setup, small_student, grid):
    _, _, ds = small_setup
    conv = ConvergenceCriterion(20, 1e-3)
    full, log_full = train_ode(small_student, ds, 0.05, grid, conv, 60)
    _, part = train_ode(small_student, ds, 0.05, grid, conv, 60, stop_at=25)
    assert part.stop_reason == "paused"
    resumed, log_res = train_ode(small_student, ds, 0.05, grid, conv, 60, state=part.state)
    assert np.array_equal(full.to_vector(), resumed.to_vector())
    assert log_full.to_csv() == log_res.to_csv()


def test_train_ode_diverges_on_nan(small_setup, small_student, grid):
    _, _, ds = small_setup
    bad = small_student.copy()
    bad.W[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train_ode(bad, ds, 0.05, grid, max_steps=5)


def test_train_ode_empty_dataset(small_student, grid, small_world, sched):
    with pytest.raises(ValueError):
        build_ode_dataset(small_world, [], sched, 2, substream(0, "x"))


def test_train_log_monotone_steps_and_csv():
    log = TrainLog()
    log.append(step=0, loss_g=1.5)
    log.append(step=2, loss_g=0.5, ema_active=True)
    with pytest.raises(ValueError):
        log.append(step=1)
    text = log.to_csv()
    assert text.splitlines()[0] == "step,loss_g,loss_c,grad_norm_g,eval_frechet,eval_sync,ema_active"
    assert text.splitlines()[2] == "2,0.5,,,,,1"
    assert log.column("loss_g").tolist() == [1.5, 0.5]


# --------------------------------------------------------------------------
# critics
# --------------------------------------------------------------------------


def _critic_batch(critic_d, F, n, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n, F, critic_d))
    tau = rng.uniform(0.02, 0.98, n)
    x_tau = (1 - tau)[:, None, None] * x0 + tau[:, None, None] * rng.normal(size=x0.shape)
    return x0, x_tau, tau


def test_affine_critic_gradient(small_cond):
    critic = CriticParams.init(substream(2, "critic"), 4, 3, 2, scale=0.3)
    critic.V[:] = np.random.default_rng(1).normal(size=critic.V.shape)
    x0, x_tau, tau = _critic_batch(3, 6, 12, 3)
    _, g = critic_loss_and_grad(critic, x0, x_tau, tau, small_cond)
    f = lambda th: critic_loss_and_grad(critic.from_vector(th), x0, x_tau, tau, small_cond)[0]
    assert directional_check(f, g.to_vector(), critic.to_vector(), np.random.default_rng(4)) <= 1e-4


def test_gaussian_critic_gradient(small_world, small_cond):
    critic = GaussianCritic.from_world(small_world)
    rng = np.random.default_rng(5)
    critic = critic.from_vector(critic.to_vector() + 0.1 * rng.normal(size=critic.size))
    x0, x_tau, tau = _critic_batch(3, 6, 12, 6)
    _, g = critic_loss_and_grad(critic, x0, x_tau, tau, small_cond)
    f = lambda th: critic_loss_and_grad(critic.from_vector(th), x0, x_tau, tau, small_cond)[0]
    assert directional_check(f, g.to_vector(), critic.to_vector(), rng) <= 1e-4


def test_gaussian_critic_from_linear_world_is_teacher(small_world, small_cond, sched):
    critic = GaussianCritic.from_world(small_world)
    _, x_tau, tau = _critic_batch(3, 6, 5, 7)
    ref = np.stack([guided_teacher_x0(small_world, x_tau[i], tau[i], small_cond, None, sched) for i in range(5)])
    assert np.allclose(critic.predict(x_tau, tau, small_cond), ref, atol=1e-9)


def test_gaussian_critic_fit_recovers_moments(small_world, small_cond):
    rng = np.random.default_rng(8)
    L = np.linalg.cholesky(small_world.covariance(6))
    shift = np.linspace(-1, 1, 18)
    x = (small_world.mean(small_cond).reshape(-1) + shift + rng.normal(size=(40000, 18)) @ L.T).reshape(-1, 6, 3)
    fit = GaussianCritic.from_world(small_world).fit_samples([(x, small_cond)], ridge=1e-9)
    assert np.allclose(fit.mean(small_cond), x.reshape(len(x), -1).mean(axis=0), atol=1e-6)
    assert np.allclose(fit.L @ fit.L.T, np.cov(x.reshape(len(x), -1).T), atol=1e-10)


def test_bucket_weights_partition_unity():
    for interp in (True, False):
        c = CriticParams.init(None, 8, 2, 1, interpolate=interp)
        w = c.bucket_weights(np.linspace(0.0, 1.0, 101))
        assert np.allclose(w.sum(axis=1), 1.0) and np.all(w >= 0)
    hard = CriticParams.init(None, 4, 2, 1, (0.0, 1.0), interpolate=False)
    assert hard.bucket_weights([0.1, 0.3, 0.6, 0.99]).argmax(axis=1).tolist() == [0, 1, 2, 3]


def test_design_rows_reproduce_predict(small_cond):
    critic = CriticParams.init(substream(9, "c"), 3, 3, 2, scale=0.5)
    critic.U[:] = np.random.default_rng(9).normal(size=critic.U.shape)
    _, x_tau, tau = _critic_batch(3, 6, 4, 10)
    rows = critic.design_rows(x_tau, tau, small_cond)
    n_feat = 2 * 3 + 5 + 1
    coef = np.concatenate([np.concatenate([critic.W[q].T, critic.V[q].T, critic.U[q].T, critic.bias[q][None]]) for q in range(3)])
    assert coef.shape == (3 * n_feat, 3)
    assert np.allclose((rows @ coef).reshape(4, 6, 3), critic.predict(x_tau, tau, small_cond))
    back = critic.with_coefficients(coef)
    assert np.allclose(back.to_vector(), critic.to_vector())


def test_least_squares_critic_is_stationary(small_cond):
    critic = CriticParams.init(None, 4, 3, 2)
    batches = [(*_critic_batch(3, 6, 64, s), small_cond) for s in range(3)]
    batches = [(x0, xt, t, c) for x0, xt, t, c in batches]
    fit = fit_critic_least_squares(critic, batches)
    grad = sum(critic_loss_and_grad(fit, x0, xt, t, c)[1].to_vector() for x0, xt, t, c in batches)
    assert np.linalg.norm(grad) < 1e-8


def test_critic_steps_reduce_held_out_loss(small_student, small_world, grid, sched):
    cfg = tiny_dmd(lr_critic=1e-2, batch_size=64)
    c = make_condition(substream(0, "small-c"), "clean", 6, 2)
    critic = CriticParams.init(None, 4, 3, 2)
    x_val = rollout_video(small_student, c, 2, None, grid, sched, substream(0, "val"), batch_shape=(256,))
    tau, x_tau = draw_noise_level(x_val, cfg, substream(1, "val"), sched)
    before = critic_loss_and_grad(critic, x_val, x_tau, tau, c)[0]
    from streamforge.optim import AdamW

    opt = AdamW(cfg.lr_critic, 0.9, 0.999)
    for s in range(300):
        rng = substream(2, "train", s)
        x = rollout_video(small_student, c, 2, None, grid, sched, rng, batch_shape=(64,))
        critic, _ = dmd_critic_step(critic, x, c, cfg, rng, sched, opt)
    after = critic_loss_and_grad(critic, x_val, x_tau, tau, c)[0]
    assert after < 0.5 * before


def test_critic_step_rejects_non_finite(small_cond, sched):
    critic = CriticParams.init(None, 2, 3, 2)
    x = np.full((4, 6, 3), np.nan)
    with pytest.raises(TrainingDiverged):
        dmd_critic_step(critic, x, small_cond, tiny_dmd(), np.random.default_rng(0), sched)


# --------------------------------------------------------------------------
# DMD generator update
# --------------------------------------------------------------------------


def test_dmd_fixed_point_when_critic_is_teacher(student, world, cond, grid, sched):
    cfg = DMDConfig.toy(batch_size=8, weight_decay=0.0)
    teacher = lambda x, t, c: guided_teacher_x0(world, x, t, c, cfg.guidance_scales(), sched)
    g, gap = dmd_generator_grad(student, teacher, world, cond, cfg, substream(0, "fp"), grid, sched)
    assert gap == 0.0 and not np.any(g.to_vector())
    new, ema, info = dmd_generator_step(student, student.copy(), teacher, world, cond, cfg, substream(0, "fp"), grid, sched)
    assert np.array_equal(new.to_vector(), student.to_vector()) and info.grad_norm == 0.0


ONE_D = GaussianWorld(M_text=[[0.8]], M_img=[[-0.5]], M_audio=[0.6], rho=0.0, base_var=0.25, F=1)


@pytest.mark.parametrize("w_scale", [0.4, 0.7, 1.3, 1.8, 2.5])
def test_one_d_dmd_direction_matches_kl_gradient(w_scale, sched):
    """Generator N(u, w^2) against data N(m, S^2); the critic is the generator's exact denoiser."""
    c = MultimodalCondition([0.5], [0.3], [0.2])
    m = float(ONE_D.mean(c)[0, 0])
    S = float(np.sqrt(ONE_D.covariance(1)[0, 0]))
    grid = SamplerGrid((48,), 48)
    cfg = DMDConfig.toy(block_size=1, teacher_cfg_scale=1.0, batch_size=20000)
    for u_scale in (-2.0, -1.0, -0.5, 0.5, 1.5):
        w, u = w_scale * S, m + u_scale * S
        gen = StudentParams.zeros(1, 1, 1)
        gen.W[0, 0, 0], gen.bias[0, 0] = w, u
        critic = GaussianCritic(np.zeros((1, 2)), np.zeros((1, 1)), np.array([u]), np.array([[w]]), 1)
        g, _ = dmd_generator_grad(gen, critic, ONE_D, c, cfg, substream(0, "1d", w_scale, u_scale), grid, sched)
        kl = np.array([w / S**2 - 1.0 / w, (u - m) / S**2])
        assert np.array_equal(np.sign([g.W[0, 0, 0], g.bias[0, 0]]), np.sign(kl)), (w_scale, u_scale)


def test_generator_gradient_stops_at_scores(small_student, small_world, small_cond, grid, sched):
    """The gradient is d/dphi of <sg(s_real - s_fake), x0_hat(phi)>, not of the full loss."""
    cfg = tiny_dmd(batch_size=8)
    critic = GaussianCritic.from_world(small_world)
    seed = substream(3, "sg")
    g, _ = dmd_generator_grad(small_student, critic, small_world, small_cond, cfg, seed, grid, sched)
    # replay the same draws to recover the frozen score difference
    rng = substream(3, "sg")
    video = rollout_video(small_student, small_cond, 2, None, grid, sched, rng, cfg.sample_mode, batch_shape=(8,))
    tau, x_tau = draw_noise_level(video, cfg, rng, sched)
    diff = guided_teacher_x0(small_world, x_tau, tau, small_cond, cfg.guidance_scales(), sched) - critic.predict(x_tau, tau, small_cond)

    def surrogate(th):
        x = rollout_video(small_student.from_vector(th), small_cond, 2, None, grid, sched, substream(3, "sg"), cfg.sample_mode, batch_shape=(8,))
        return -np.sum(diff * x) / 8

    assert directional_check(surrogate, g.to_vector(), small_student.to_vector(), np.random.default_rng(7), n=20) <= 1e-4


def test_generator_grad_rejects_nan_rollout(small_student, small_world, small_cond, grid, sched):
    bad = small_student.copy()
    bad.bias[:] = np.nan
    with pytest.raises(TrainingDiverged):
        dmd_generator_grad(bad, GaussianCritic.from_world(small_world), small_world, small_cond, tiny_dmd(), substream(0, "n"), grid, sched)


def test_config_validation_and_scales():
    assert DMDConfig().guidance_scales() == {"text": 1.0, "img": 1.0, "audio": 6.0}
    toy = DMDConfig.toy()
    assert np.isclose(toy.lr_generator / DMDConfig().lr_generator, 1000) and toy.teacher_cfg_scale == 1.5
    for bad in (dict(lr_generator=0), dict(update_ratio=0), dict(ema_decay=1.0), dict(tau_range=(0.5, 0.4)), dict(critic_kind="mlp"), dict(sample_mode="ddpm")):
        with pytest.raises(ValueError):
            DMDConfig(**bad)


# --------------------------------------------------------------------------
# exact generator statistics
# --------------------------------------------------------------------------


def test_linear_noise_basis():
    n = LinearNoise(5)
    a = n.standard_normal((6, 2))
    b = n.standard_normal((6, 3))
    basis = np.concatenate([a, b], axis=1)
    assert not np.any(basis[0]) and np.array_equal(basis[1:], np.eye(5))
    with pytest.raises(ValueError):
        n.standard_normal((6, 1))


@pytest.mark.parametrize("mode", ["deterministic", "stochastic"])
def test_generator_moments_match_monte_carlo(small_student, small_cond, grid, sched, mode):
    mean, jac = generator_moments(small_student, small_cond, 2, grid, sched, None, mode, 3, 3)
    assert jac.shape[0] == noise_dims(2, 3, 3, 4, mode)
    x = rollout_video(small_student, small_cond, 2, None, grid, sched, substream(0, "mc"), mode, batch_shape=(20000,))
    se = np.sqrt(np.einsum("nfd,nfd->fd", jac, jac) / 20000)
    assert np.all(np.abs(x.mean(axis=0) - mean) <= 4 * se + 1e-12)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@pytest.fixture
def dmd_inputs(small_setup, small_student):
    world, conds, _ = small_setup
    return small_student, world, conds


def test_alternation_bookkeeping(dmd_inputs, grid, sched):
    gen, world, conds = dmd_inputs
    cfg = tiny_dmd()
    _, _, log = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched)
    assert log.generator_steps == 4 and log.critic_steps == cfg.critic_warmup + cfg.update_ratio * 4
    assert log.column("step").tolist() == [0, 1, 2, 3, 4]
    assert np.isfinite(log.column("eval_frechet")).all() and len(log.column("eval_frechet")) == 3
    cfg2 = tiny_dmd(ratio_direction="generator_per_critic")
    _, _, log2 = train_dmd(gen, None, conds, cfg2, world, grid=grid, sched=sched)
    assert log2.critic_steps == cfg2.critic_warmup + 4 // cfg2.update_ratio


def test_ema_equals_raw_before_start(dmd_inputs, grid, sched):
    gen, world, conds = dmd_inputs
    cfg = tiny_dmd(ema_start=2, ema_decay=0.5)
    _, _, log = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched, stop_at=2)
    st = log.state
    assert np.array_equal(st.ema.to_vector(), st.gen.to_vector())
    prev_ema = st.ema.copy()
    _, _, log = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched, state=st, stop_at=3)
    st = log.state
    assert np.allclose(st.ema.to_vector(), 0.5 * prev_ema.to_vector() + 0.5 * st.gen.to_vector())
    assert not np.array_equal(st.ema.to_vector(), st.gen.to_vector())


def test_train_dmd_deterministic_and_resumable(dmd_inputs, grid, sched):
    gen, world, conds = dmd_inputs
    cfg = tiny_dmd()
    a, best_a, log_a = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched)
    b, best_b, log_b = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched)
    assert np.array_equal(a.to_vector(), b.to_vector()) and log_a.to_csv() == log_b.to_csv()
    _, _, part = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched, stop_at=3)
    assert part.stop_reason == "paused"
    c, best_c, log_c = train_dmd(gen, None, conds, cfg, world, grid=grid, sched=sched, state=part.state)
    assert np.array_equal(a.to_vector(), c.to_vector()) and np.array_equal(best_a.to_vector(), best_c.to_vector())
    assert log_a.to_csv() == log_c.to_csv() and log_c.stop_reason == "completed"


def test_best_checkpoint_kept_when_training_degrades(small_setup, grid, sched):
    world, conds, ds = small_setup
    good, _ = train_ode(StudentParams.init(substream(1, "s"), 4, 3, 2, 0.3), ds, 0.05, grid, ConvergenceCriterion(50, 1e-3), 5000)
    cfg = tiny_dmd(lr_generator=0.5, total_steps=6, eval_every=1, ema_start=1000)
    _, best, log = train_dmd(good, None, conds, cfg, world, conds[:2], grid, sched)
    mode = cfg.sample_mode
    start = evaluate_generator(good, world, conds[:2], grid, sched, mode).frechet
    assert log.best_frechet <= start
    assert np.isclose(evaluate_generator(best, world, conds[:2], grid, sched, mode).frechet, log.best_frechet)
    evals = log.column("eval_frechet")
    assert log.peak_then_degrade == (evals[-1] > log.best_frechet * (1 + cfg.degrade_tolerance))
    assert log.peak_then_degrade


def test_train_dmd_rejects_empty_conditions(small_student, small_world, grid, sched):
    with pytest.raises(ValueError):
        train_dmd(small_student, None, [], tiny_dmd(), small_world, grid=grid, sched=sched)


@pytest.mark.parametrize("kind", ["gaussian", "affine"])
def test_critic_init_tracks_generator(dmd_inputs, grid, sched, kind):
    from streamforge.distillation import init_critic

    gen, world, conds = dmd_inputs
    cfg = tiny_dmd(critic_kind=kind, critic_init_samples=512)
    critic = init_critic(world, conds[:1], cfg, grid, sched, gen)
    c = conds[0]
    x0 = rollout_video(gen, c, 2, None, grid, sched, substream(5, "held"), batch_shape=(256,))
    tau, x_tau = draw_noise_level(x0, cfg, substream(6, "held"), sched)
    fitted = critic_loss_and_grad(critic, x0, x_tau, tau, c)[0]
    teacher = np.mean(np.sum((guided_teacher_x0(world, x_tau, tau, c, None, sched) - x0) ** 2, axis=(1, 2)))
    assert fitted < teacher


# --------------------------------------------------------------------------
# exposure bias probe
# --------------------------------------------------------------------------


def test_exposure_probe_flow_oracle_has_no_gap(small_world, grid, sched):
    conds = [make_condition(substream(i, "exp"), "clean", 9, 2) for i in range(2)]
    oracle = OracleStudent(small_world, grid, sched, "flow")
    curves = exposure_bias_probe(oracle, small_world, conds, 3, grid, sched, "stochastic")
    assert curves.gap.shape == (3,)
    assert np.max(np.abs(curves.teacher_forced)) < 1e-9 and np.max(np.abs(curves.gap)) < 1e-9


def test_exposure_probe_first_block_has_no_gap(small_student, small_world, grid, sched):
    conds = [make_condition(substream(0, "exp"), "clean", 9, 2)]
    curves = exposure_bias_probe(small_student, small_world, conds, 3, grid, sched)
    assert abs(curves.gap[0]) < 1e-9 and np.all(curves.self_rollout >= 0)
