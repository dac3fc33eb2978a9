import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from trajdiff.diffusion import (ddim_sigma, ddim_step, ddpm_step, eps_from_x0, forward_chain, forward_noise,
                                recover_x0_eps, velocity_target)
from trajdiff.schedules import NoiseSchedule, build_linear_schedule, subset_timesteps

finite = st.floats(-50, 50, allow_nan=False)


def test_forward_noise_degenerate_cases(schedule, rng):
    x0 = rng.standard_normal((2, 25))
    eps = rng.standard_normal((2, 25))
    t = 300
    assert np.array_equal(forward_noise(schedule, x0, t, np.zeros_like(x0)), schedule.a[t] * x0)
    assert np.array_equal(forward_noise(schedule, np.zeros_like(x0), t, eps), schedule.sigma[t] * eps)


def test_forward_noise_rejects_bad_input(schedule):
    with pytest.raises(ValueError):
        forward_noise(schedule, np.zeros(3), 5, np.zeros(4))
    with pytest.raises(ValueError):
        forward_noise(schedule, np.zeros(3), 0, np.zeros(3))
    with pytest.raises(ValueError):
        forward_noise(schedule, np.zeros(3), 1001, np.zeros(3))


def test_forward_noise_matches_markov_chain_moments():
    # 1e5 chained draws per coordinate checked against the closed form within 3 standard errors
    s = build_linear_schedule(100, 1e-3, 0.05)
    t = 50
    x0 = np.array([1.5, -0.7, 0.0, 3.0])
    n = 100_000
    chain = forward_chain(s, np.broadcast_to(x0, (n, 4)), t, np.random.default_rng(7))
    mean_se = s.sigma[t] / math.sqrt(n)
    assert np.all(np.abs(chain.mean(axis=0) - s.a[t] * x0) < 3 * mean_se)
    var = chain.var(axis=0)
    var_se = s.sigma[t] ** 2 * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var - s.sigma[t] ** 2) < 3 * var_se)


def test_velocity_target_degenerate_cases(schedule, rng):
    x0, eps = rng.standard_normal((2, 2, 25))
    t = 700
    assert np.array_equal(velocity_target(schedule, np.zeros_like(x0), eps, t), schedule.a[t] * eps)
    assert np.array_equal(velocity_target(schedule, x0, np.zeros_like(x0), t), -schedule.sigma[t] * x0)


def test_recover_substitution(schedule, rng):
    x0 = rng.standard_normal((2, 25))
    t = 123
    x0_hat, _ = recover_x0_eps(schedule, schedule.a[t] * x0, np.zeros_like(x0), t)
    assert np.allclose(x0_hat, schedule.a[t] ** 2 * x0, atol=1e-15)


@given(t=st.integers(1, 1000), x0=arrays(np.float64, (2, 5), elements=finite),
       eps=arrays(np.float64, (2, 5), elements=finite))
def test_round_trip_identity(t, x0, eps):
    s = build_linear_schedule()
    x_t = forward_noise(s, x0, t, eps)
    v = velocity_target(s, x0, eps, t)
    x0_hat, eps_hat = recover_x0_eps(s, x_t, v, t)
    scale = max(1.0, np.max(np.abs(x0)), np.max(np.abs(eps)))
    assert np.max(np.abs(x0_hat - x0)) < 1e-12 * scale * 10
    assert np.max(np.abs(eps_hat - eps)) < 1e-12 * scale * 10


def test_round_trip_batched_t(schedule, rng):
    B = 10_000
    x0 = rng.standard_normal((B, 2, 25))
    eps = rng.standard_normal((B, 2, 25))
    t = rng.integers(1, 1001, size=B)
    x0_hat, eps_hat = recover_x0_eps(schedule, forward_noise(schedule, x0, t, eps),
                                     velocity_target(schedule, x0, eps, t), t)
    assert np.max(np.abs(x0_hat - x0)) < 1e-12
    assert np.max(np.abs(eps_hat - eps)) < 1e-12


@given(t=st.integers(1, 1000), x_t=arrays(np.float64, (6,), elements=finite),
       v=arrays(np.float64, (6,), elements=finite))
def test_eps_forms_agree(t, x_t, v):
    s = build_linear_schedule()
    x0_hat, eps_div = recover_x0_eps(s, x_t, v, t)
    algebraic = s.sigma[t] * x_t + s.a[t] * v
    scale = max(1.0, np.max(np.abs(x_t)), np.max(np.abs(v)))
    assert s.sigma[t] > 1e-6
    assert np.max(np.abs(eps_div - algebraic)) < 1e-10 * scale
    assert np.allclose(eps_from_x0(s, x_t, x0_hat, t), eps_div, atol=1e-10 * scale)


def test_recover_uses_algebraic_form_when_sigma_vanishes():
    # a schedule whose first step has sigma below the division floor
    s = NoiseSchedule.from_betas([1e-14, 0.1])
    assert s.sigma[1] < 1e-6
    x_t, v = np.array([0.3, -2.0]), np.array([1.0, 0.5])
    _, eps = recover_x0_eps(s, x_t, v, 1)
    assert np.array_equal(eps, s.sigma[1] * x_t + s.a[1] * v)


def test_ddpm_step_noiseless_and_zero_eps(schedule, rng):
    x = rng.standard_normal((2, 25))
    t = 400
    z0 = np.zeros_like(x)
    assert np.allclose(ddpm_step(schedule, x, z0, t, z0), x / math.sqrt(schedule.alpha[t]), rtol=0, atol=1e-15)
    assert np.array_equal(ddpm_step(schedule, x, x, 1, z0), ddpm_step(schedule, x, x, 1, z0))


def test_ddpm_scalar_hand_oracle():
    # alpha_t = 0.99 and alpha_bar_t = 0.5: build a two-step schedule that hits both
    s = NoiseSchedule.from_betas([1 - 0.5 / 0.99, 0.01])
    assert s.alpha[2] == pytest.approx(0.99) and s.alpha_bar[2] == pytest.approx(0.5)
    out = ddpm_step(s, np.array([1.0]), np.array([0.2]), 2, np.array([0.0]))
    # (1/sqrt(0.99)) * (1 - (0.01 / sqrt(0.5)) * 0.2), evaluated by hand
    assert out[0] == pytest.approx(1.0021951, abs=1e-7)


def test_ddpm_step_adds_posterior_noise(schedule):
    x = np.zeros(3)
    z = np.ones(3)
    t = 500
    assert np.allclose(ddpm_step(schedule, x, x, t, z), math.sqrt(schedule.beta_tilde[t]))


def test_ddim_terminal_step_returns_x0(schedule, rng):
    x_t, x0_hat, eps_hat = rng.standard_normal((3, 2, 25))
    assert np.array_equal(ddim_step(schedule, x_t, x0_hat, eps_hat, 112, 0), x0_hat)


def test_ddim_scalar_hand_oracle():
    s = NoiseSchedule.from_betas([0.1, 0.5])
    assert s.alpha_bar[1] == pytest.approx(0.9)
    out = ddim_step(s, np.array([0.0]), np.array([2.0]), np.array([0.5]), 2, 1)
    assert out[0] == pytest.approx(math.sqrt(0.9) * 2 + math.sqrt(0.1) * 0.5, abs=1e-15)
    assert out[0] == pytest.approx(2.0554, abs=1e-4)


def test_ddim_is_pure(schedule, rng):
    args = rng.standard_normal((3, 2, 25))
    a = ddim_step(schedule, *args, 889, 778)
    b = ddim_step(schedule, *args, 889, 778)
    assert a.tobytes() == b.tobytes()


def test_ddim_sigma_adjacent_matches_posterior_variance(schedule):
    for t in (2, 100, 1000):
        assert ddim_sigma(schedule, t, t - 1, 1.0) ** 2 == pytest.approx(schedule.beta_tilde[t], rel=1e-10)
    assert ddim_sigma(schedule, 500, 100, 0.0) == 0.0


def test_ddim_eta_one_consumes_noise(schedule, rng):
    x0_hat, eps_hat, noise = rng.standard_normal((3, 4))
    out = ddim_step(schedule, x0_hat, x0_hat, eps_hat, 500, 400, 1.0, noise)
    sig = ddim_sigma(schedule, 500, 400, 1.0)
    expect = (schedule.a[400] * x0_hat + math.sqrt(1 - schedule.alpha_bar[400] - sig ** 2) * eps_hat
              + sig * noise)
    assert np.allclose(out, expect, atol=1e-14)
    with pytest.raises(ValueError):
        ddim_step(schedule, x0_hat, x0_hat, eps_hat, 500, 400, 1.0)


def test_ddim_rejects_bad_arguments(schedule):
    z = np.zeros(2)
    with pytest.raises(ValueError):
        ddim_step(schedule, z, z, z, 10, 10)
    with pytest.raises(ValueError):
        ddim_step(schedule, z, z, z, 10, 5, eta=1.5, noise=z)
    with pytest.raises(ValueError):
        ddim_step(schedule, z, z, np.zeros(3), 10, 5)


def test_full_deterministic_pass_is_reproducible():
    s = build_linear_schedule(200)

    def run():
        x = np.random.default_rng(3).standard_normal((2, 5))
        steps = subset_timesteps(s, s.T)
        for i, t in enumerate(steps):
            t_prev = int(steps[i + 1]) if i + 1 < len(steps) else 0
            v = 0.3 * x  # a fixed analytic predictor
            x0_hat, eps_hat = recover_x0_eps(s, x, v, int(t))
            x = ddim_step(s, x, x0_hat, eps_hat, int(t), t_prev)
        return x

    assert run().tobytes() == run().tobytes()
