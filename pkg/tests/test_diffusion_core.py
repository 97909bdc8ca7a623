import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from streamforge.diffusion_core import (
    ConfigurationError,
    CosineSchedule,
    GaussianWorld,
    MultimodalCondition,
    NoiseSchedule,
    add_noise,
    analytic_score,
    cfg_combine,
    ddim_step,
    guided_teacher_x0,
    make_schedule,
    sample_world,
    soft_clip,
    teacher_ode_rollout,
    teacher_x0,
)
from streamforge.eval_harness import fit_gaussian, gaussian_frechet, GaussianSummary
from streamforge.rng import substream


def scalar_world(mu, var, audio_gain=1.0):
    """d=1, F=1 world whose mean is ``mu`` for the condition built by ``scalar_cond``."""
    return GaussianWorld(np.zeros((1, 1)), np.zeros((1, 1)), np.array([audio_gain]), rho=0.0, base_var=var, F=1)


def scalar_cond(mu):
    return MultimodalCondition(np.zeros(1), np.zeros(1), np.array([mu]))


# --------------------------------------------------------------------------
# schedule and noising
# --------------------------------------------------------------------------


def test_schedule_grid_of_49():
    s = make_schedule(48)
    assert len(s.times) == 49 and s.times[0] == 0.0 and s.times[48] == 1.0


def test_schedule_two_steps_alpha_values():
    s = make_schedule(2)
    assert np.array_equal(s.alpha(s.times), [1.0, 0.5, 0.0])


@given(st.integers(2, 200))
def test_schedule_identity_and_monotonicity(n):
    s = make_schedule(n)
    a, sg = s.alpha(s.times), s.sigma(s.times)
    assert np.allclose(a + sg, 1.0)
    assert np.all(np.diff(a) < 0) and np.all(np.diff(sg) > 0)
    assert a[0] == 1 and sg[0] == 0 and a[-1] == 0 and sg[-1] == 1


def test_schedule_rejects_small_n():
    with pytest.raises(ValueError):
        make_schedule(1)


def test_cosine_schedule_endpoints():
    s = make_schedule(10, "cosine")
    assert isinstance(s, CosineSchedule)
    assert np.isclose(s.alpha(0.0), 1) and np.isclose(s.sigma(1.0), 1) and abs(s.alpha(1.0)) < 1e-15


def test_add_noise_trivial_cases(sched):
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(21, 8)), rng.normal(size=(21, 8))
    assert np.array_equal(add_noise(x0, 0.0, eps, sched), x0)
    assert np.array_equal(add_noise(x0, 1.0, eps, sched), eps)
    assert np.array_equal(add_noise(np.zeros_like(x0), 0.5, eps, sched), 0.5 * eps)
    with pytest.raises(ValueError):
        add_noise(x0, 1.5, eps, sched)


def test_ddim_step_is_euler_step(sched):
    rng = np.random.default_rng(1)
    x, x0 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    t, tn = 0.75, 0.5
    euler = x + (tn - t) * (x - x0) / t
    assert np.allclose(ddim_step(x, x0, t, tn, sched), euler)


# --------------------------------------------------------------------------
# teacher
# --------------------------------------------------------------------------


def test_soft_clip_limits():
    assert soft_clip(np.array([1.0]), None)[0] == 1.0
    assert abs(soft_clip(np.array([1e-6]), 2.0)[0] - 1e-6) < 1e-15
    assert abs(soft_clip(np.array([1e6]), 2.0)[0] - 2.0) < 1e-12


def test_teacher_x0_matches_quadrature_1d(sched):
    """Posterior mean of x0 given x_t, integrated numerically over x0."""
    mu, var = 0.7, 0.6
    w, c = scalar_world(mu, var), scalar_cond(mu)
    for t, xt in [(0.1, 0.3), (0.5, -1.2), (0.9, 2.0), (0.3, 0.0)]:
        a, s = 1 - t, t
        dens = lambda x0: np.exp(-0.5 * (x0 - mu) ** 2 / var - 0.5 * (xt - a * x0) ** 2 / s**2)
        num = integrate.quad(lambda x0: x0 * dens(x0), -30, 30, epsabs=0, epsrel=1e-13, limit=400)[0]
        den = integrate.quad(dens, -30, 30, epsabs=0, epsrel=1e-13, limit=400)[0]
        got = teacher_x0(w, np.array([[xt]]), t, c, sched)[0, 0]
        closed = mu + a * var / (a * a * var + s * s) * (xt - a * mu)
        assert abs(got - num / den) / abs(num / den) <= 1e-6
        assert abs(got - closed) <= 1e-12


def test_teacher_x0_trivial_cases(world, cond, sched):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(21, 8))
    assert np.allclose(teacher_x0(world, x, 0.0, cond, sched), x)
    mu = world.mean(cond)
    assert np.allclose(teacher_x0(world, 0.6 * mu, 0.4, cond, sched), mu)
    out, flag = teacher_x0(world, x, 1.0, cond, sched, return_flag=True)
    assert flag and np.allclose(out, mu)


def test_tweedie_identity(small_world, small_cond, sched):
    rng = np.random.default_rng(3)
    for t in (0.05, 0.3, 0.7, 0.95):
        x = rng.normal(size=(6, 3))
        x0 = teacher_x0(small_world, x, t, small_cond, sched)
        tw = (x + t * t * analytic_score(small_world, x, t, small_cond, sched)) / (1 - t)
        assert np.max(np.abs(tw - x0)) / np.max(np.abs(x0)) <= 1e-10


def test_teacher_batched_times_match_scalar(world, cond, sched):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 21, 8))
    ts = np.array([0.1, 0.5, 0.9])
    batched = teacher_x0(world, x, ts, cond, sched)
    for i, t in enumerate(ts):
        assert np.allclose(batched[i], teacher_x0(world, x[i], t, cond, sched))


# --------------------------------------------------------------------------
# guidance
# --------------------------------------------------------------------------


def test_cfg_combine_trivial():
    rng = np.random.default_rng(5)
    null, p = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert np.allclose(cfg_combine(null, {"audio": p}, {"audio": 1.0}), p)
    assert np.allclose(cfg_combine(null, {"audio": p, "img": p}, {"audio": 0.0, "img": 0.0}), null)


def test_cfg_combine_two_modalities_hand_expansion():
    null = np.array([1.0, -2.0])
    pa, pi = np.array([3.0, 0.0]), np.array([0.0, 4.0])
    got = cfg_combine(null, {"audio": pa, "img": pi}, {"audio": 2.0, "img": 0.5})
    # [1 + 2*2 + 0.5*(-1), -2 + 2*2 + 0.5*6]
    assert np.allclose(got, [4.5, 5.0])


def test_cfg_combine_shape_mismatch():
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), {"audio": np.zeros(3)}, {"audio": 1.0})


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_cfg_combine_identical_predictions_fixed(s1, s2):
    p = np.array([0.3, -1.1, 2.0])
    assert np.allclose(cfg_combine(p, {"a": p, "b": p}, {"a": s1, "b": s2}), p)


def test_unit_guidance_reproduces_conditional_teacher(world, cond, sched):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(21, 8))
    plain = teacher_x0(world, x, 0.4, cond, sched)
    guided = guided_teacher_x0(world, x, 0.4, cond, {"text": 1.0, "img": 1.0, "audio": 1.0}, sched)
    assert np.allclose(plain, guided)


# --------------------------------------------------------------------------
# ODE rollout and world sampling
# --------------------------------------------------------------------------


def test_rollout_shape_and_determinism(world, cond, sched):
    z = substream(0, "z").standard_normal((21, 8))
    tr = teacher_ode_rollout(world, cond, sched, z)
    assert tr.states.shape == (49, 21, 8) and np.array_equal(tr.states[0], z)
    assert np.array_equal(tr.states, teacher_ode_rollout(world, cond, sched, z).states)


def test_rollout_final_state_is_last_prediction(world, cond, sched):
    z = substream(0, "z").standard_normal((21, 8))
    tr = teacher_ode_rollout(world, cond, sched, z)
    t_last = tr.times[-2]
    assert np.allclose(tr.x0, teacher_x0(world, tr.states[-2], t_last, cond, sched))


def test_rollout_endpoints_match_world(world, cond, sched):
    z = substream(1, "z").standard_normal((2000, 21, 8))
    tr = teacher_ode_rollout(world, cond, sched, z)
    cov = world.covariance(21)
    got = fit_gaussian(tr.x0.reshape(2000, -1))
    target = GaussianSummary(world.mean(cond).reshape(-1), cov)
    assert gaussian_frechet(got, target) <= 0.05 * np.trace(cov)


def test_rollout_marginals_exact_at_every_grid_time(world, cond, sched):
    """The rollout is affine in z, so basis inputs give its exact law at each time."""
    n = 21 * 8
    basis = np.concatenate([np.zeros((1, n)), np.eye(n)]).reshape(n + 1, 21, 8)
    tr = teacher_ode_rollout(world, cond, sched, basis)
    mu, cov = world.mean(cond).reshape(-1), world.covariance(21)
    tol = 0.05 * np.trace(cov)
    for j in range(1, 49):
        states = tr.states[j].reshape(n + 1, n)
        jac = states[1:] - states[0]
        t = tr.times[j]
        a, s = 1 - t, t
        target = GaussianSummary(a * mu, a * a * cov + s * s * np.eye(n))
        assert gaussian_frechet(GaussianSummary(states[0], jac.T @ jac), target) <= tol


def test_sample_world_deterministic_when_degenerate(cond):
    w = GaussianWorld.random(substream(0, "w"), rho=0.0, base_var=0.0)
    assert np.array_equal(sample_world(w, cond, np.random.default_rng(0)), w.mean(cond))


def test_sample_world_monte_carlo(world, cond):
    x = sample_world(world, cond, substream(2, "mc"), 10_000)
    se = np.sqrt(world.base_var / 10_000)
    assert np.all(np.abs(x.mean(axis=0) - world.mean(cond)) < 3 * se)
    r = x - world.mean(cond)
    corr = np.mean(r[:, 1:, :] * r[:, :-1, :]) / np.mean(r * r)
    assert abs(corr - world.rho) < 0.05


def test_world_validation():
    m = np.zeros((2, 2))
    with pytest.raises(ConfigurationError):
        GaussianWorld(m, m, np.zeros(2), rho=1.0)
    with pytest.raises(ConfigurationError):
        GaussianWorld(m, m, np.zeros(2), img_saturation=0.0)


def test_condition_null_and_drop(cond):
    n = cond.null()
    assert n.text_null and n.img_null and n.audio_null and not np.any(n.audio)
    o = cond.only("audio")
    assert o.text_null and not o.audio_null and np.array_equal(o.audio, cond.audio)
