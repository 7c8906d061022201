import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atfm.schedule import (
    NoRootError,
    Schedule,
    find_truncation_time,
    forward_marginal,
    frobenius_ratio,
    truncation_factorization,
)

SCHED = Schedule()


def random_psd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def alpha_by_quadrature(sched, tau, points=10_000):
    s = np.linspace(0, tau, points)
    return math.exp(-np.trapezoid(sched.beta(s), s))


def test_alpha_at_zero_is_one():
    assert SCHED.alpha(0.0) == 1.0


def test_alpha_at_horizon():
    # int_0^1 (0.1 + 19.9 s) ds = 0.1 + 9.95
    assert SCHED.alpha(1.0) == pytest.approx(math.exp(-10.05), rel=1e-12)
    assert SCHED.alpha(1.0) == pytest.approx(4.32e-5, rel=1e-2)


@pytest.mark.parametrize("tau", [0.05, 0.3, 0.77, 1.0])
def test_alpha_matches_quadrature(tau):
    assert SCHED.alpha(tau) == pytest.approx(alpha_by_quadrature(SCHED, tau), rel=1e-6)


def test_alpha_strictly_decreasing():
    taus = np.linspace(0, 1, 1001)
    a = SCHED.alpha(taus)
    assert np.all(np.diff(a) < 0)
    assert np.all((a > 0) & (a <= 1))


def test_alpha_rejects_out_of_range():
    with pytest.raises(ValueError):
        SCHED.alpha(-0.1)
    with pytest.raises(ValueError):
        SCHED.alpha(1.5)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(beta_min=0)
    with pytest.raises(ValueError):
        Schedule(beta_min=2, beta_max=1)
    assert len(Schedule(steps=1000).grid()) == 1001


def test_forward_marginal_at_zero_is_identity_map():
    rng = np.random.default_rng(0)
    mu0, s0 = rng.normal(size=4), random_psd(rng, 4)
    mean, cov = forward_marginal(SCHED, mu0, s0, 0.0)
    assert np.array_equal(mean, mu0)
    assert np.array_equal(cov, s0)


def test_forward_marginal_at_horizon_is_near_standard():
    rng = np.random.default_rng(1)
    mu0, s0 = rng.normal(size=5), random_psd(rng, 5)
    mean, cov = forward_marginal(SCHED, mu0, s0, 1.0)
    a = SCHED.alpha(1.0)
    assert np.abs(cov - np.eye(5)).max() < 1e-4 * max(1, np.abs(s0).max())
    assert np.linalg.norm(mean) <= math.sqrt(a) * np.linalg.norm(mu0) + 1e-15


@pytest.mark.parametrize("tau", [0.0, 0.2, 0.9])
def test_identity_covariance_is_fixed_point(tau):
    _, cov = forward_marginal(SCHED, np.ones(3), np.eye(3), tau)
    np.testing.assert_allclose(cov, np.eye(3), atol=1e-15)


def test_forward_marginal_rejects_indefinite():
    with pytest.raises(ValueError):
        forward_marginal(SCHED, np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 0.5)


def test_factorization_scalar_identity_case():
    # alpha = 0.25 at the tau solving integrated_beta(tau) = ln 4
    tau = _tau_for_alpha(SCHED, 0.25)
    factor, diag = truncation_factorization(SCHED, np.eye(3), tau)
    np.testing.assert_allclose(factor, 0.5 * np.eye(3), atol=1e-12)
    np.testing.assert_allclose(diag, 0.75, atol=1e-12)


def test_factorization_at_zero():
    s0 = random_psd(np.random.default_rng(2), 4)
    factor, diag = truncation_factorization(SCHED, s0, 0.0)
    np.testing.assert_array_equal(factor, np.linalg.cholesky(s0))
    np.testing.assert_array_equal(diag, np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(d=st.integers(1, 8), tau=st.floats(0, 1), seed=st.integers(0, 2**31))
def test_factorization_reconstructs_marginal(d, tau, seed):
    rng = np.random.default_rng(seed)
    s0 = random_psd(rng, d)
    factor, diag = truncation_factorization(SCHED, s0, tau)
    _, cov = forward_marginal(SCHED, rng.normal(size=d), s0, tau)
    assert np.linalg.norm(factor @ factor.T + np.diag(diag) - cov) < 1e-10


def test_factorization_rejects_indefinite():
    with pytest.raises(ValueError, match="Cholesky"):
        truncation_factorization(SCHED, np.array([[1.0, 2.0], [2.0, 1.0]]), 0.3)


def _tau_for_alpha(sched, a):
    # solve beta_min tau + (beta_max - beta_min) tau^2 / 2T = -ln a analytically
    k = (sched.beta_max - sched.beta_min) / (2 * sched.horizon)
    c = -math.log(a)
    return (-sched.beta_min + math.sqrt(sched.beta_min**2 + 4 * k * c)) / (2 * k)


def _instance_with_ratio(rho, d=3):
    # mu0 = unit vector, sigma0 = (rho / sqrt(d)) I  => ||sigma0||_F / ||mu0||^2 = rho
    mu0 = np.zeros(d)
    mu0[0] = 1.0
    return mu0, rho / math.sqrt(d) * np.eye(d)


def test_truncation_time_recovers_half_horizon():
    rho = 1 - SCHED.alpha(0.5)
    mu0, s0 = _instance_with_ratio(rho)
    assert frobenius_ratio(mu0, s0) == pytest.approx(rho, rel=1e-14)
    tau = find_truncation_time(SCHED, mu0, s0)
    assert tau == pytest.approx(0.5, abs=1e-6)
    assert abs(1 - SCHED.alpha(tau) - rho) < 1e-8


def test_truncation_time_no_root():
    upper = 1 - SCHED.alpha(1.0)
    for rho in (upper, upper + 0.1, 2.0):
        mu0, s0 = _instance_with_ratio(rho)
        with pytest.raises(NoRootError):
            find_truncation_time(SCHED, mu0, s0)
    with pytest.raises(NoRootError):
        find_truncation_time(SCHED, np.zeros(3), np.eye(3))


def test_truncation_time_decreases_when_mean_grows():
    rng = np.random.default_rng(3)
    mu0 = rng.normal(size=4)
    s0 = 0.05 * random_psd(rng, 4)
    s0 *= 0.5 * np.dot(mu0, mu0) / np.linalg.norm(s0)
    t1 = find_truncation_time(SCHED, mu0, s0)
    t2 = find_truncation_time(SCHED, 2 * mu0, s0)
    assert frobenius_ratio(2 * mu0, s0) == pytest.approx(frobenius_ratio(mu0, s0) / 4)
    assert t2 < t1


@settings(max_examples=40, deadline=None)
@given(rho=st.floats(1e-6, 0.999), seed=st.integers(0, 2**31))
def test_truncation_time_satisfies_scalar_equation(rho, seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    s0 = random_psd(rng, d)
    mu0 = rng.normal(size=d)
    mu0 *= math.sqrt(np.linalg.norm(s0) / rho) / np.linalg.norm(mu0)
    tau = find_truncation_time(SCHED, mu0, s0)
    assert 0 < tau < 1
    assert abs(1 - SCHED.alpha(tau) - frobenius_ratio(mu0, s0)) < 1e-8
