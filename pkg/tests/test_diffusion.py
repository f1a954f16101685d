import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mpgd.diffusion import (
    GaussianAnalyticDenoiser,
    GmmAnalyticDenoiser,
    ddim_step,
    initial_noise,
    make_ddim_timesteps,
    make_schedule,
    sample_unconditional,
    tweedie_x0,
)

SCHED = make_schedule()


# -- schedule -----------------------------------------------------------------


def test_default_schedule_product():
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert SCHED.T == 1000
    assert SCHED.alpha_bars[1000] > 0
    assert SCHED.alpha_bars[1000] == pytest.approx(prod, rel=1e-12)
    assert SCHED.betas[0] == 1e-4 and SCHED.betas[-1] == pytest.approx(0.02, abs=1e-15)


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bar(0) == 1.0
    assert s.alpha_bar(1) == 0.5


def test_schedule_monotone():
    assert np.all(np.diff(SCHED.betas) >= 0)
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert SCHED.alpha_bars[0] == 1.0
    np.testing.assert_allclose(SCHED.alphas, 1 - SCHED.betas)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_errors(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


# -- DDIM timesteps -----------------------------------------------------------


def test_ten_step_timesteps():
    ts = make_ddim_timesteps(20, 1000)
    assert len(ts) == 20
    assert ts[0] == 1000 and ts[-1] == 50
    assert set(np.diff(ts)) == {-50}


@pytest.mark.parametrize("n", [20, 50, 100])
def test_grid_timesteps(n):
    ts = make_ddim_timesteps(n, 1000)
    assert len(ts) == n and ts[0] == 1000 and min(ts) >= 1
    assert len(set(np.diff(ts))) == 1


def test_full_and_single_schedule():
    assert make_ddim_timesteps(1000, 1000) == list(range(1000, 0, -1))
    assert make_ddim_timesteps(1, 1000) == [1000]
    ts = make_ddim_timesteps(3, 1000)
    assert ts == [1000, 667, 334]


def test_too_many_steps():
    with pytest.raises(ValueError):
        make_ddim_timesteps(1001, 1000)
    with pytest.raises(ValueError):
        make_ddim_timesteps(0, 1000)


# -- Tweedie / DDIM step ------------------------------------------------------


def test_tweedie_no_noise(rng):
    x = rng.random((4, 4, 1))
    np.testing.assert_array_equal(tweedie_x0(x, rng.random(x.shape), 1.0), x)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(0, 1000))
def test_tweedie_inverts_construction(ab, seed):
    rng = np.random.default_rng(seed)
    x0, z = rng.random((3, 3, 1)), rng.standard_normal((3, 3, 1))
    xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * z
    assert np.max(np.abs(tweedie_x0(xt, z, ab) - x0)) < 1e-12 / math.sqrt(ab)


def test_tweedie_rejects_zero():
    with pytest.raises(ValueError):
        tweedie_x0(np.zeros(1), np.zeros(1), 0.0)


@pytest.mark.parametrize("t", [1, 50, 500, 1000])
def test_tweedie_equals_gaussian_posterior_mean(rng, t):
    mu = rng.random((4, 4, 1))
    s2 = 0.07
    den = GaussianAnalyticDenoiser(mu, s2, SCHED)
    xt = rng.standard_normal(mu.shape)
    ab = SCHED.alpha_bar(t)
    # E[x0 | xt] for x0 ~ N(mu, s2), xt | x0 ~ N(sqrt(ab) x0, 1 - ab), by completing the square
    precision = 1 / s2 + ab / (1 - ab)
    closed = (mu / s2 + math.sqrt(ab) * xt / (1 - ab)) / precision
    assert np.max(np.abs(tweedie_x0(xt, den.predict_eps(xt, t), ab) - closed)) < 1e-10


def test_ddim_terminal_step(rng):
    x0 = rng.random((2, 2, 3))
    out = ddim_step(rng.random(x0.shape), x0, rng.random(x0.shape), 1.0)
    np.testing.assert_array_equal(out, x0)


def test_ddim_zero_eps(rng):
    x0 = rng.random((2, 2, 1))
    np.testing.assert_allclose(ddim_step(rng.random(x0.shape), x0, np.zeros_like(x0), 0.36), 0.6 * x0)


def test_ddim_one_pixel_by_hand():
    # prior N(0.5, 0.1), xt = 0.3 at alpha_bar = 0.5, step to alpha_bar_prev = 0.8
    sched = make_schedule(1, 0.5, 0.5)
    den = GaussianAnalyticDenoiser(np.full((1, 1, 1), 0.5), 0.1, sched)
    xt = np.full((1, 1, 1), 0.3)
    x0 = (0.1 * math.sqrt(0.5) * 0.3 + 0.5 * 0.5) / (0.5 * 0.1 + 0.5)
    eps = (0.3 - math.sqrt(0.5) * x0) / math.sqrt(0.5)
    expected = math.sqrt(0.8) * x0 + math.sqrt(0.2) * eps
    e = den.predict_eps(xt, 1)
    out = ddim_step(xt, tweedie_x0(xt, e, 0.5), e, 0.8)
    assert out.item() == pytest.approx(expected, abs=1e-14)


def test_ddim_step_range():
    with pytest.raises(ValueError):
        ddim_step(np.zeros(1), np.zeros(1), np.zeros(1), 0.0)


# -- unconditional sampling ---------------------------------------------------


def closed_form_gaussian_flow(x_T, mu, s2, sched, timesteps):
    """Per-pixel scalar recursion of deterministic DDIM under an exact Gaussian denoiser.

    With u = x_t - sqrt(ab_t) mu, one transition t -> t' multiplies u by
    (s2 sqrt(ab_t ab_t') + sqrt((1 - ab_t)(1 - ab_t'))) / (ab_t s2 + 1 - ab_t).
    """
    states = []
    u = x_T - math.sqrt(sched.alpha_bar(timesteps[0])) * mu
    for i, t in enumerate(timesteps):
        ab = sched.alpha_bar(t)
        states.append(u + math.sqrt(ab) * mu)
        abp = sched.alpha_bar(timesteps[i + 1]) if i + 1 < len(timesteps) else 1.0
        u = u * (s2 * math.sqrt(ab * abp) + math.sqrt((1 - ab) * (1 - abp))) / (ab * s2 + 1 - ab)
    return states, u + mu


@pytest.mark.parametrize("num_steps", [1, 7, 20, 100, 1000])
def test_gaussian_trajectory_closed_form(num_steps):
    rng = np.random.default_rng(3)
    mu = rng.random((6, 6, 1))
    s2 = 0.03
    den = GaussianAnalyticDenoiser(mu, s2, SCHED)
    traj = []
    out = sample_unconditional(den, SCHED, num_steps, seed=21, trajectory=traj)
    ts = make_ddim_timesteps(num_steps, SCHED.T)
    states, final = closed_form_gaussian_flow(initial_noise(mu.shape, 21), mu, s2, SCHED, ts)
    assert [t for t, _ in traj] == ts
    for (_, x), ref in zip(traj, states):
        assert np.max(np.abs(x - ref)) < 1e-9
    assert np.max(np.abs(out - final)) < 1e-9


def test_gaussian_full_schedule_statistics():
    d = 64 * 64
    mu = np.full((64, 64, 1), 0.4)
    s2 = 0.01
    out = sample_unconditional(GaussianAnalyticDenoiser(mu, s2, SCHED), SCHED, 1000, seed=5)
    sigma_p = math.sqrt(s2)
    assert abs(np.mean(out - mu)) <= 3 * sigma_p / math.sqrt(d)
    # the flow transports N(0, I) onto the prior: per-pixel spread ~ sigma_p
    assert np.std(out - mu) == pytest.approx(sigma_p, rel=0.05)


def test_sampling_deterministic():
    den = GaussianAnalyticDenoiser(np.zeros((5, 5, 3)), 0.2, SCHED)
    a = sample_unconditional(den, SCHED, 20, seed=8)
    b = sample_unconditional(den, SCHED, 20, seed=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample_unconditional(den, SCHED, 20, seed=9))


def test_sampling_needs_shape():
    class Bare:
        def predict_eps(self, x, t):
            return np.zeros_like(x)

    with pytest.raises(ValueError):
        sample_unconditional(Bare(), SCHED, 5, seed=0)
    assert sample_unconditional(Bare(), SCHED, 5, seed=0, shape=(2, 2, 1)).shape == (2, 2, 1)


def test_sampling_pure_function_of_seed():
    den = GaussianAnalyticDenoiser(np.full((4, 4, 1), 0.5), 0.05, SCHED)
    first = sample_unconditional(den, SCHED, 10, seed=4)
    for other in (1, 2, 3):
        sample_unconditional(den, SCHED, 10, seed=other)
    np.testing.assert_array_equal(sample_unconditional(den, SCHED, 10, seed=4), first)


# -- Gaussian mixture ---------------------------------------------------------


def test_gmm_single_component_matches_gaussian(rng):
    mu = rng.random((3, 3, 1))
    g = GaussianAnalyticDenoiser(mu, 0.05, SCHED)
    m = GmmAnalyticDenoiser([(1.0, mu, 0.05)], SCHED)
    x = rng.standard_normal(mu.shape)
    for t in (1, 300, 1000):
        np.testing.assert_allclose(m.predict_eps(x, t), g.predict_eps(x, t), atol=1e-12)


@pytest.mark.parametrize("t", [10, 200, 600])
def test_gmm_posterior_mean_quadrature(t):
    comps = [(0.3, np.full((1, 1, 1), 0.2), 0.01), (0.7, np.full((1, 1, 1), 0.8), 0.02)]
    den = GmmAnalyticDenoiser(comps, SCHED)
    ab = SCHED.alpha_bar(t)
    xt = 0.35

    def prior(x0):
        return sum(w * math.exp(-((x0 - m.item()) ** 2) / (2 * v)) / math.sqrt(2 * math.pi * v)
                   for w, m, v in comps)

    def lik(x0):
        return math.exp(-((xt - math.sqrt(ab) * x0) ** 2) / (2 * (1 - ab)))

    num = integrate.quad(lambda x0: x0 * prior(x0) * lik(x0), -2, 3, points=[0.2, 0.8], limit=200)[0]
    den_ = integrate.quad(lambda x0: prior(x0) * lik(x0), -2, 3, points=[0.2, 0.8], limit=200)[0]
    assert den.posterior_mean(np.full((1, 1, 1), xt), t).item() == pytest.approx(num / den_, abs=1e-8)


def test_gmm_validation():
    mu = np.zeros((1, 1, 1))
    with pytest.raises(ValueError):
        GmmAnalyticDenoiser([], SCHED)
    with pytest.raises(ValueError):
        GmmAnalyticDenoiser([(0.6, mu, 0.1), (0.6, mu, 0.1)], SCHED)
    with pytest.raises(ValueError):
        GmmAnalyticDenoiser([(1.0, mu, 0.0)], SCHED)


def test_gmm_samples_visit_both_modes():
    lo, hi = np.full((2, 2, 1), 0.1), np.full((2, 2, 1), 0.9)
    den = GmmAnalyticDenoiser([(0.5, lo, 0.002), (0.5, hi, 0.002)], SCHED)
    near_hi = 0
    for seed in range(120):
        out = sample_unconditional(den, SCHED, 50, seed=seed)
        assert min(np.abs(out - 0.1).max(), np.abs(out - 0.9).max()) < 0.25
        near_hi += np.abs(out - 0.9).max() < 0.25
    assert 0.3 <= near_hi / 120 <= 0.7
