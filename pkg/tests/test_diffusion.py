import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsta import (
    NoiseSchedule,
    OutOfRangeError,
    ShapeError,
    ValidationError,
    diffusion_loss,
    forward_noise,
    make_condition,
    make_noise_schedule,
    null_condition,
    rescaled_noise_schedule,
    sample,
)
from tsta.diffusion import guided_noise, noise_latent


class LinearModel:
    """Tiny deterministic noise predictor: ``A z + t c + B cond`` (flattened)."""

    def __init__(self, shape, d_cond, seed=0):
        rng = np.random.default_rng(seed)
        n = int(np.prod(shape))
        self.shape = shape
        self.A = rng.standard_normal((n, n)) * 0.1
        self.c = rng.standard_normal(n) * 0.01
        self.B = rng.standard_normal((n, d_cond))
        self.calls = []

    def __call__(self, z, t, cond):
        self.calls.append((t, cond.null))
        return (self.A @ z.ravel() + t * self.c + self.B @ cond.z_x).reshape(self.shape)


def test_single_step_schedule():
    s = make_noise_schedule(1, 0.5, 0.5)
    assert s.alpha_bar(1) == 0.5


def test_cumulative_product_oracle():
    s = make_noise_schedule(1000, 1e-4, 2e-2)
    abar = 1.0
    for i in range(1000):
        beta = 1e-4 + (2e-2 - 1e-4) * i / 999
        abar *= 1.0 - beta
    assert math.isclose(s.alpha_bar(1000), abar, rel_tol=1e-10)


def test_schedule_validation():
    with pytest.raises(ValidationError):
        make_noise_schedule(10, 2e-2, 1e-4)
    with pytest.raises(ValidationError):
        make_noise_schedule(0)
    with pytest.raises(ValidationError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(OutOfRangeError):
        make_noise_schedule(5).alpha_bar(6)


@given(st.integers(1, 400), st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
def test_alpha_bar_monotone_positive(n, b0, extra):
    s = make_noise_schedule(n, b0, min(b0 + extra, 0.9))
    assert np.all(s.alpha_bars > 0)
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_schedule_json_round_trip():
    s = make_noise_schedule(17)
    np.testing.assert_array_equal(NoiseSchedule.from_dict(s.to_dict()).betas, s.betas)


def test_zero_noise_scales_latent():
    s = make_noise_schedule(50)
    z0 = np.random.default_rng(0).standard_normal((2, 3, 4))
    z = forward_noise(z0, 20, np.zeros_like(z0), s)
    np.testing.assert_array_equal(z, np.sqrt(s.alpha_bar(20)) * z0)


def test_unit_alpha_bar_is_identity():
    z0 = np.random.default_rng(1).standard_normal((3, 4))
    eps = np.random.default_rng(2).standard_normal((3, 4))
    np.testing.assert_array_equal(noise_latent(z0, eps, 1.0), z0)


@pytest.mark.parametrize("t", [1, 25, 50])
def test_monte_carlo_moments(t):
    s = make_noise_schedule(50)
    abar = s.alpha_bar(t)
    rng = np.random.default_rng(t)
    z0 = rng.standard_normal(6)
    n = 10_000
    draws = np.stack([forward_noise(z0, t, rng.standard_normal(6), s) for _ in range(n)])
    var = 1.0 - abar
    mean_sigma = math.sqrt(var / n)
    # variance of the sample variance for Gaussian data: 2 var^2 / (n - 1)
    var_sigma = math.sqrt(2 * var * var / (n - 1))
    assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(abar) * z0) <= 3 * mean_sigma + 1e-15)
    assert np.all(np.abs(draws.var(axis=0, ddof=1) - var) <= 3 * var_sigma)


def test_variance_preservation():
    s = make_noise_schedule(50)
    t = 30
    abar = s.alpha_bar(t)
    rng = np.random.default_rng(3)
    n = 10_000
    z0 = rng.standard_normal(n)
    zt = forward_noise(z0, t, rng.standard_normal(n), s)
    # second moment of z_t: 1 for unit-variance z0; its sample mean has variance Var(z_t^2)/n = 2/n
    expected = abar * 1.0 + (1 - abar)
    assert abs(np.mean(zt**2) - expected) <= 3 * math.sqrt(2.0 / n)


def test_forward_noise_shape_check():
    s = make_noise_schedule(5)
    with pytest.raises(ShapeError):
        forward_noise(np.zeros((2, 2)), 1, np.zeros((2, 3)), s)


def test_loss_trivial_models():
    s = make_noise_schedule(10)
    rng = np.random.default_rng(4)
    z0 = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 5))
    cond = make_condition(rng.standard_normal(4))
    assert diffusion_loss(lambda z, t, c: eps, z0, 3, eps, cond, s) == 0.0
    zero = diffusion_loss(lambda z, t, c: np.zeros_like(z), z0, 3, eps, cond, s)
    assert zero == pytest.approx(np.mean(eps**2), abs=1e-15)


def test_loss_matches_straight_line_oracle():
    s = make_noise_schedule(10)
    rng = np.random.default_rng(5)
    shape = (2, 3)
    model = LinearModel(shape, 4, seed=6)
    z0 = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    cond = make_condition(rng.standard_normal(4))
    t = 7
    # independent: product loop for abar, explicit element loop for the mean
    abar = 1.0
    for i in range(t):
        abar *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i / 9)
    zt = math.sqrt(abar) * z0 + math.sqrt(1 - abar) * eps
    pred = model(zt, t, cond)
    acc = 0.0
    for idx in np.ndindex(shape):
        acc += (eps[idx] - pred[idx]) ** 2
    expected = acc / eps.size
    assert abs(diffusion_loss(model, z0, t, eps, cond, s) - expected) <= 1e-12


@given(st.integers(0, 2**31))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    s = make_noise_schedule(5)
    z0, eps, pred = (rng.standard_normal(4) for _ in range(3))
    cond = make_condition(rng.standard_normal(2))
    assert diffusion_loss(lambda *_: pred, z0, 2, eps, cond, s) >= 0.0


def test_condition_helpers():
    c = make_condition([3.0, 4.0])
    np.testing.assert_allclose(c.z_x, [0.6, 0.8])
    assert c.null_like().null and not np.any(c.null_like().z_x)
    with pytest.raises(ValidationError):
        make_condition([0.0, 0.0])


# -- sampling ----------------------------------------------------------------------


@pytest.fixture
def sampler_setup():
    shape = (2, 2, 2)
    return LinearModel(shape, 3, seed=7), make_condition([1.0, -2.0, 0.5]), make_noise_schedule(12), shape


def test_cfg_one_equals_conditional_only(sampler_setup):
    model, cond, s, shape = sampler_setup
    a = sample(model, cond, s, 1.0, seed=3, shape=shape)
    b = sample(model, cond, s, None, seed=3, shape=shape)
    np.testing.assert_array_equal(a, b)


def test_cfg_zero_equals_unconditional(sampler_setup):
    model, cond, s, shape = sampler_setup
    a = sample(model, cond, s, 0.0, seed=3, shape=shape)
    b = sample(model, null_condition(3), s, None, seed=3, shape=shape)
    np.testing.assert_array_equal(a, b)


def test_sampling_deterministic(sampler_setup):
    model, cond, s, shape = sampler_setup
    a = sample(model, cond, s, 5.0, seed=11, shape=shape)
    b = sample(model, cond, s, 5.0, seed=11, shape=shape)
    np.testing.assert_array_equal(a, b)
    c = sample(model, cond, s, 5.0, seed=12, shape=shape)
    assert not np.array_equal(a, c)


def test_guidance_extrapolates(sampler_setup):
    model, cond, _, shape = sampler_setup
    z = np.random.default_rng(0).standard_normal(shape)
    eu = model(z, 4, cond.null_like())
    ec = model(z, 4, cond)
    np.testing.assert_allclose(guided_noise(model, z, 4, cond, 5.0), eu + 5.0 * (ec - eu), atol=1e-12)


def test_sampler_visits_timesteps_in_reverse(sampler_setup):
    model, cond, s, shape = sampler_setup
    seen = []
    sample(model, cond, s, None, seed=0, shape=shape, callback=lambda t, z: seen.append(t))
    assert seen == list(range(12, 0, -1))
    assert [t for t, _ in model.calls] == seen


def test_single_step_sampler_oracle():
    # T = 1: z_0 = (z_1 - beta / sqrt(1 - abar) * eps_hat) / sqrt(alpha), no noise added
    s = make_noise_schedule(1, 0.3, 0.3)
    shape = (3,)
    model = LinearModel(shape, 2, seed=1)
    cond = make_condition([1.0, 1.0])
    z1 = np.random.default_rng(9).standard_normal(shape)
    expected = (z1 - 0.3 / math.sqrt(0.3) * model(z1, 1, cond)) / math.sqrt(0.7)
    np.testing.assert_allclose(sample(model, cond, s, None, seed=9, shape=shape), expected, atol=1e-12)


def test_negative_cfg_rejected(sampler_setup):
    model, cond, s, shape = sampler_setup
    with pytest.raises(ValidationError):
        sample(model, cond, s, -1.0, seed=0, shape=shape)


def test_rescaled_schedule_reaches_noise():
    short = rescaled_noise_schedule(50)
    ref = make_noise_schedule(1000)
    assert short.betas[0] == pytest.approx(2e-3) and short.betas[-1] == pytest.approx(0.4)
    assert short.alpha_bar(50) < 1e-4 and ref.alpha_bar(1000) < 1e-4
    # the unscaled 50-step chain stops far from pure noise
    assert make_noise_schedule(50).alpha_bar(50) > 0.5


def test_clipped_sampler_matches_plain_when_clip_is_loose(sampler_setup):
    model, cond, s, shape = sampler_setup
    a = sample(model, cond, s, None, seed=2, shape=shape)
    b = sample(model, cond, s, None, seed=2, shape=shape, clip_x0=1e9)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


def test_clipped_sampler_bounds_final_latent(sampler_setup):
    model, cond, s, shape = sampler_setup
    z = sample(model, cond, s, 5.0, seed=2, shape=shape, clip_x0=0.5)
    # the last step returns the posterior mean with abar_prev = 1, i.e. the clipped x0
    assert np.max(np.abs(z)) <= 0.5 + 1e-12
