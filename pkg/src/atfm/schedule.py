"""Continuous variance-preserving schedule with a linear beta ramp.

Also provides the two numerical witnesses used for the truncation Gaussian:
the low-rank factorization of the forward marginal at any time, and the
bisection search for the time at which a target Gaussian is matched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NoRootError(ValueError):
    """Raised when no matching time exists inside the schedule horizon."""


@dataclass(frozen=True)
class Schedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0
    steps: int = 1000

    def __post_init__(self):
        if not self.beta_min > 0:
            raise ValueError("beta_min must be positive")
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max must be >= beta_min")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def _check(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < 0) or np.any(tau > self.horizon):
            raise ValueError(f"tau must lie in [0, {self.horizon}], got {tau}")
        return tau

    def beta(self, s):
        s = self._check(s)
        return self.beta_min + (self.beta_max - self.beta_min) * s / self.horizon

    def integrated_beta(self, tau):
        tau = self._check(tau)
        return self.beta_min * tau + (self.beta_max - self.beta_min) * tau**2 / (2 * self.horizon)

    def alpha(self, tau):
        """exp(-int_0^tau beta(s) ds); a float for scalar input."""
        out = np.exp(-self.integrated_beta(tau))
        return float(out) if out.ndim == 0 else out

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def _check_psd(sigma0: np.ndarray) -> np.ndarray:
    sigma0 = np.asarray(sigma0, dtype=float)
    if sigma0.ndim != 2 or sigma0.shape[0] != sigma0.shape[1]:
        raise ValueError("sigma0 must be a square matrix")
    if not np.allclose(sigma0, sigma0.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma0).max())):
        raise ValueError("sigma0 must be symmetric")
    # jitter admits semi-definite inputs while still rejecting indefinite ones
    jitter = 1e-12 * max(1.0, float(np.trace(sigma0)))
    try:
        np.linalg.cholesky(sigma0 + jitter * np.eye(len(sigma0)))
    except np.linalg.LinAlgError:
        raise ValueError("sigma0 is not positive semi-definite") from None
    return sigma0


def forward_marginal(sched: Schedule, mu0, sigma0, tau):
    """Mean and covariance of the forward process at ``tau`` started from N(mu0, sigma0)."""
    sigma0 = _check_psd(sigma0)
    mu0 = np.asarray(mu0, dtype=float)
    a = sched.alpha(tau)
    mean = np.sqrt(a) * mu0
    cov = a * sigma0 + (1 - a) * np.eye(len(sigma0))
    return mean, cov


def truncation_factorization(sched: Schedule, sigma0, tau, *, upper: bool = False):
    """Return ``(factor, diag)`` with factor @ factor.T + diag(diag) == marginal covariance.

    ``upper=True`` deliberately uses the transposed Cholesky factor; it exists
    only so the verification suite can demonstrate a failing check.
    """
    sigma0 = np.asarray(sigma0, dtype=float)
    try:
        chol = np.linalg.cholesky(sigma0)
    except np.linalg.LinAlgError:
        raise ValueError("Cholesky factorization failed: sigma0 is not positive definite") from None
    if upper:
        chol = chol.T
    a = sched.alpha(tau)
    return np.sqrt(a) * chol, np.full(len(sigma0), 1 - a)


def frobenius_ratio(mu0, sigma0) -> float:
    mu0 = np.asarray(mu0, dtype=float)
    return float(np.linalg.norm(sigma0, "fro") / np.dot(mu0, mu0))


def find_truncation_time(sched: Schedule, mu0, sigma0, *, tol: float = 1e-8, max_iter: int = 200) -> float:
    """Bisection root of 1 - alpha(tau) - ||sigma0||_F / ||mu0||^2 on (0, horizon)."""
    sigma0 = _check_psd(sigma0)
    if not np.any(np.asarray(mu0)):
        raise NoRootError("mu0 is zero; the ratio is undefined")
    rho = frobenius_ratio(mu0, sigma0)
    upper = 1 - sched.alpha(sched.horizon)
    if not 0 < rho < upper:
        raise NoRootError(
            f"ratio {rho:.6g} outside (0, {upper:.6g}); no matching time within the horizon"
        )

    def f(tau):
        return 1 - sched.alpha(tau) - rho

    lo, hi = 0.0, sched.horizon
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val) < tol * 1e-4 or hi - lo < 1e-15:
            break
        if val < 0:
            lo = mid
        else:
            hi = mid
    if abs(f(mid)) >= tol:
        raise NoRootError(f"bisection did not converge: |f| = {abs(f(mid)):.3g}")
    return mid
