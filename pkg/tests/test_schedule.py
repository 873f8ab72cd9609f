import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oceanrecon.schedule import (
    build_linear_schedule,
    posterior_mean,
    predict_x0,
    q_sample,
    schedule_from_betas,
)


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(1000, 1e-4, 0.02)


def test_linear_schedule_terminal_alpha_bar(sched):
    # independent product, float64
    expected = np.prod([1 - (1e-4 + (0.02 - 1e-4) * i / 999) for i in range(1000)])
    assert sched.alpha_bar[-1] == pytest.approx(expected, rel=1e-10)
    assert sched.alpha_bar[-1] == pytest.approx(4.04e-5, rel=0.01)
    assert sched.alpha_bar[-1] < 1e-4


def test_schedule_invariants(sched):
    assert np.all((sched.beta > 0) & (sched.beta < 1))
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.posterior_var <= sched.beta)
    assert sched.posterior_var[0] == 0.0
    assert sched.beta[0] == 1e-4 and sched.beta[-1] == 0.02


def test_single_step_schedule():
    s = build_linear_schedule(1, 0.05, 0.05)
    np.testing.assert_array_equal(s.beta, [0.05])
    assert s.alpha_bar[0] == 1 - 0.05


def test_two_step_hand_products():
    s = schedule_from_betas([0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72])


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_invalid_ranges(args):
    with pytest.raises(ValueError):
        build_linear_schedule(*args)


def test_q_sample_zero_noise(sched):
    x0 = np.random.default_rng(0).standard_normal((2, 3, 4))
    out = q_sample(x0, 300, np.zeros_like(x0), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[299]) * x0, rtol=1e-6)


def test_q_sample_terminal_is_almost_noise(sched):
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal(50), rng.standard_normal(50)
    np.testing.assert_allclose(q_sample(x0, 1000, eps, sched), eps, atol=0.02)


def test_q_sample_step_range(sched):
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 0, np.zeros(2), sched)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 1001, np.zeros(2), sched)


def test_predict_x0_inverts_q_sample(sched):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        x0, eps = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
        t = int(rng.integers(1, 1001))
        worst = max(worst, np.abs(predict_x0(q_sample(x0, t, eps, sched), eps, t, sched) - x0).max())
    assert worst <= 1e-5
    x0 = rng.standard_normal(64).astype(np.float32)
    eps = rng.standard_normal(64).astype(np.float32)
    back = predict_x0(q_sample(x0, 500, eps, sched), eps, 500, sched)
    assert back.dtype == np.float32
    np.testing.assert_allclose(back, x0, atol=1e-5)


def test_predict_x0_without_noise(sched):
    x0 = np.linspace(-1, 1, 10)
    xt = np.sqrt(sched.alpha_bar[99]) * x0
    np.testing.assert_allclose(predict_x0(xt, np.zeros_like(xt), 100, sched), x0, atol=1e-6)


def test_predict_x0_singular():
    s = schedule_from_betas(np.full(40, 0.6))  # alpha_bar_40 = 0.4**40 ~ 1.2e-16
    with pytest.raises(FloatingPointError):
        predict_x0(np.zeros(1), np.zeros(1), 40, s)


def test_posterior_mean_two_step_by_hand():
    s = schedule_from_betas([0.1, 0.2])
    # t=2: ab=0.72, ab_prev=0.9, beta=0.2, alpha=0.8
    coef_a = np.sqrt(0.9) * 0.2 / (1 - 0.72)
    coef_b = np.sqrt(0.8) * (1 - 0.9) / (1 - 0.72)
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(posterior_mean(x, x, 2, s), x * (coef_a + coef_b), rtol=1e-6)


def test_posterior_mean_final_step_collapses(sched):
    rng = np.random.default_rng(3)
    x0, xt = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_allclose(posterior_mean(x0, xt, 1, sched), x0, rtol=1e-6)


def test_posterior_coefficients_sum_independent(sched):
    for t in (2, 10, 500, 1000):
        ab = np.prod(1 - sched.beta[:t])
        ab_prev = np.prod(1 - sched.beta[: t - 1])
        b = sched.beta[t - 1]
        expected = (np.sqrt(ab_prev) * b + np.sqrt(1 - b) * (1 - ab_prev)) / (1 - ab)
        assert posterior_mean(1.0, 1.0, t, sched) == pytest.approx(expected, rel=1e-6)


def test_posterior_mean_monte_carlo_oracle():
    """E[x_{t-1} | x_t, x_0] from simulated forward chains vs the closed form."""
    betas = np.array([0.1, 0.2, 0.3])
    s = schedule_from_betas(betas)
    rng = np.random.default_rng(4)
    n, x0 = 1_000_000, 0.7
    chain = [np.full(n, x0)]
    for b in betas:
        chain.append(np.sqrt(1 - b) * chain[-1] + np.sqrt(b) * rng.standard_normal(n))
    for t in (2, 3):
        prev, cur = chain[t - 1], chain[t]
        # the conditional mean is linear in x_t (jointly Gaussian), so OLS is unbiased
        slope, intercept = np.polyfit(cur, prev, 1)
        resid = prev - (slope * cur + intercept)
        sigma = resid.std(ddof=2)
        for probe in (-1.0, 0.3, 1.5):
            est = slope * probe + intercept
            se = sigma * np.sqrt(1 / n + (probe - cur.mean()) ** 2 / ((cur - cur.mean()) ** 2).sum())
            exact = float(posterior_mean(x0, probe, t, s))
            assert abs(est - exact) < 3 * se + 1e-6, (t, probe, est, exact, se)
        assert sigma**2 == pytest.approx(s.posterior_var[t - 1], rel=0.01)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(1e-5, 1e-2), st.floats(1.0, 50.0))
def test_schedule_properties(T, beta_start, ratio):
    beta_end = min(beta_start * ratio, 0.5)
    s = build_linear_schedule(T, beta_start, beta_end)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.posterior_var <= s.beta + 1e-15)
    assert np.all(s.posterior_var >= 0)
