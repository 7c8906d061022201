"""Numerical witnesses for the truncation theorems and the core algebra.

Each check returns a :class:`CheckResult`; :func:`run_suite` runs a named
group of them. The checks use fixed seeds, so a failure is reproducible.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import metrics
from .lowrank import LowRankGaussian
from .schedule import NoRootError, Schedule, find_truncation_time, forward_marginal, truncation_factorization
from .sfm import endpoint_projection, flow_matching_loss, ot_interpolate, sf_loss

SUITES = ("theorems", "algebra", "all")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _random_psd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def check_factorization(instances: int = 50, seed: int = 0, break_cholesky: bool = False):
    """Factor @ factor.T + diag reproduces the forward marginal covariance."""
    sched = Schedule()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(1, 9))
        s0 = _random_psd(rng, d)
        tau = float(rng.uniform(0, 1))
        factor, diag = truncation_factorization(sched, s0, tau, upper=break_cholesky)
        _, cov = forward_marginal(sched, np.zeros(d), s0, tau)
        worst = max(worst, float(np.linalg.norm(factor @ factor.T + np.diag(diag) - cov)))
    return worst < 1e-10, f"max Frobenius error {worst:.2e} over {instances} instances (tol 1e-10)"


def check_truncation_time(instances: int = 20, seed: int = 1):
    """Bisection root satisfies the scalar equation; inadmissible ratios raise."""
    sched = Schedule()
    rng = np.random.default_rng(seed)
    worst = 0.0
    upper = 1 - sched.alpha(sched.horizon)
    for _ in range(instances):
        d = int(rng.integers(1, 9))
        s0 = _random_psd(rng, d)
        rho = float(rng.uniform(0.01, 0.99))
        mu0 = rng.normal(size=d)
        mu0 *= math.sqrt(np.linalg.norm(s0) / rho) / np.linalg.norm(mu0)
        tau = find_truncation_time(sched, mu0, s0)
        f = 1 - sched.alpha(tau) - np.linalg.norm(s0) / np.dot(mu0, mu0)
        worst = max(worst, abs(f))
    refused = 0
    bad = [upper * (1 + 1e-9), 1.5, 10.0]
    for rho in bad:
        mu0 = np.array([1.0, 0.0, 0.0])
        try:
            find_truncation_time(sched, mu0, rho / math.sqrt(3) * np.eye(3))
        except NoRootError:
            refused += 1
    ok = worst < 1e-8 and refused == len(bad)
    return ok, f"max |f(tau*)| {worst:.2e} over {instances} instances; {refused}/{len(bad)} inadmissible refused"


def check_woodbury(instances: int = 100, seed: int = 2):
    """Low-rank log-density agrees with a dense Cholesky evaluation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(1, 21))
        r = int(rng.integers(0, min(5, d) + 1))
        mu = rng.normal(size=d)
        factor = rng.normal(size=(d, r))
        diag = rng.uniform(0.1, 1.5, d)
        z = rng.normal(size=d) * 2
        dist = LowRankGaussian(torch.tensor(mu), torch.tensor(factor), torch.tensor(diag))
        cov = factor @ factor.T + np.diag(diag)
        chol = np.linalg.cholesky(cov)
        sol = np.linalg.solve(chol, z - mu)
        dense = -0.5 * (d * math.log(2 * math.pi) + 2 * np.log(np.diag(chol)).sum() + sol @ sol)
        worst = max(worst, abs(dist.log_density(z).item() - dense))
    return worst < 1e-8, f"max |difference| {worst:.2e} over {instances} instances (tol 1e-8)"


def check_flow_identities(instances: int = 50, seed: int = 3):
    """Endpoint projection, interpolation endpoints and the alpha = 0 loss."""
    rng = np.random.default_rng(seed)
    worst_end = 0.0
    exact = True
    for _ in range(instances):
        x0 = torch.tensor(rng.normal(size=(6, 6)) * 3)
        x1 = torch.tensor(rng.normal(size=(6, 6)) * 3)
        t = float(rng.uniform(0, 1))
        xt = ot_interpolate(x0, x1, t)
        worst_end = max(worst_end, (endpoint_projection(xt, x1 - x0, t) - x1).abs().max().item())
        exact &= torch.equal(ot_interpolate(x0, x1, 0.0), x0) and torch.equal(ot_interpolate(x0, x1, 1.0), x1)
        v = torch.tensor(rng.normal(size=(6, 6)))
        ann = (x1 > 0).double()[None]
        exact &= sf_loss(v, x0, x1, xt, t, ann, 0.0).item() == flow_matching_loss(v, x0, x1).item()
    ok = worst_end < 1e-12 and exact
    return ok, f"endpoint error {worst_end:.2e} (tol 1e-12); exact identities {'hold' if exact else 'broken'}"


def _brute_best(score):
    c = len(score)
    return max(sum(score[i][p[i]] for i in range(c)) for p in itertools.permutations(range(c)))


def check_hungarian(trials: int = 100, max_size: int = 6, seed: int = 4):
    """Assignment totals match factorial enumeration for every size up to ``max_size``."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for c in range(1, max_size + 1):
        for _ in range(trials):
            score = rng.normal(size=(c, c))
            perm = metrics.hungarian(score, maximize=True)
            if abs(score[np.arange(c), perm].sum() - _brute_best(score.tolist())) > 1e-12:
                mismatches += 1
    return mismatches == 0, f"{mismatches} mismatches in {trials} trials for each size 1..{max_size}"


def check_hm_iou_replication(trials: int = 10, seed: int = 5):
    """HM-IoU at (n, m) = (2, 3) agrees with replicating to C = 6 and enumerating."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        preds = rng.random((2, 6, 6)) < 0.4
        gts = rng.random((3, 6, 6)) < 0.4
        rp = np.repeat(preds, 3, 0)
        rg = np.repeat(gts, 2, 0)
        score = metrics.iou_matrix(rp, rg)
        expected = _brute_best(score.tolist()) / 6
        worst = max(worst, abs(metrics.hm_iou(preds, gts) - expected))
    return worst < 1e-12, f"max difference {worst:.2e} over {trials} trials"


def _suite_checks(suite: str, break_cholesky: bool) -> list[tuple[str, Callable]]:
    theorems = [
        ("theorem.factorization", lambda: check_factorization(break_cholesky=break_cholesky)),
        ("theorem.truncation_time", check_truncation_time),
    ]
    algebra = [
        ("algebra.woodbury", check_woodbury),
        ("algebra.flow_identities", check_flow_identities),
        ("algebra.hungarian", check_hungarian),
        ("algebra.hm_iou_replication", check_hm_iou_replication),
    ]
    if suite == "theorems":
        return theorems
    if suite == "algebra":
        return algebra
    if suite == "all":
        return theorems + algebra
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")


def run_suite(suite: str = "all", break_cholesky: bool = False) -> list[CheckResult]:
    results = []
    for name, fn in _suite_checks(suite, break_cholesky):
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return results
