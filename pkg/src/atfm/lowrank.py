"""Low-rank-plus-diagonal Gaussian over flattened logit maps.

The covariance is ``factor @ factor.T + diag(diag)``. Sampling costs O(d*r)
and the density is evaluated with the Woodbury identity and the matrix
determinant lemma, so only r x r systems are ever factorized.

All tensors may carry leading batch dimensions: ``mu`` is ``(..., d)``,
``factor`` is ``(..., d, r)`` and ``diag`` is ``(..., d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DIAG_FLOOR = 1e-5


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def derive_seed(master: int, *keys: int) -> int:
    """Stable 63-bit seed for the stream identified by ``(master, *keys)``."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in keys]])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class LowRankGaussian:
    mu: torch.Tensor
    factor: torch.Tensor
    diag: torch.Tensor

    def __post_init__(self):
        mu = _as_tensor(self.mu)
        factor = _as_tensor(self.factor, mu.dtype)
        diag = _as_tensor(self.diag, mu.dtype)
        if factor.dim() == mu.dim():
            # a single column given as a vector
            factor = factor.unsqueeze(-1)
        if factor.shape[:-1] != mu.shape:
            raise ValueError(
                f"factor shape {tuple(factor.shape)} incompatible with mu {tuple(mu.shape)}"
            )
        if diag.shape != mu.shape:
            raise ValueError(f"diag shape {tuple(diag.shape)} != mu shape {tuple(mu.shape)}")
        if factor.shape[-1] > mu.shape[-1]:
            raise ValueError("rank may not exceed the dimension")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "factor", factor)
        object.__setattr__(self, "diag", diag)
        self.check_floor()

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def rank(self) -> int:
        return self.factor.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return tuple(self.mu.shape[:-1])

    def check_floor(self):
        # tolerance absorbs the float32 rounding of the floor itself
        if bool((self.diag.detach() < DIAG_FLOOR * (1 - 1e-6)).any()):
            raise ValueError(f"diag has entries below the floor {DIAG_FLOOR}")

    def sample(self, rng: torch.Generator | int, count: int = 1) -> torch.Tensor:
        """Draw ``count`` reparameterized samples, shape ``(count, *batch, d)``."""
        if count < 1:
            raise ValueError("count must be >= 1")
        if not isinstance(rng, torch.Generator):
            rng = make_generator(rng)
        shape = (count, *self.batch_shape)
        eps_r = torch.randn(*shape, self.rank, generator=rng, dtype=self.mu.dtype)
        eps_d = torch.randn(*shape, self.dim, generator=rng, dtype=self.mu.dtype)
        return self.transform(eps_r, eps_d)

    def transform(self, eps_r: torch.Tensor, eps_d: torch.Tensor) -> torch.Tensor:
        """Map standard-normal noise to samples: mu + D eps_r + sqrt(diag) * eps_d."""
        low = (self.factor @ eps_r.unsqueeze(-1)).squeeze(-1) if self.rank else 0.0
        return self.mu + low + self.diag.sqrt() * eps_d

    def log_density(self, z) -> torch.Tensor:
        z = _as_tensor(z, self.mu.dtype)
        if z.shape[-1] != self.dim:
            raise ValueError(f"z has length {z.shape[-1]}, expected {self.dim}")
        self.check_floor()
        diff = z - self.mu
        inv_diag = 1.0 / self.diag
        quad = (diff * diff * inv_diag).sum(-1)
        logdet = self.diag.log().sum(-1)
        if self.rank:
            dt = self.factor.transpose(-1, -2)
            cap = torch.eye(self.rank, dtype=self.mu.dtype) + dt @ (self.factor * inv_diag.unsqueeze(-1))
            chol = torch.linalg.cholesky(cap)
            proj = (dt @ (diff * inv_diag).unsqueeze(-1))
            sol = torch.cholesky_solve(proj, chol).squeeze(-1)
            quad = quad - (proj.squeeze(-1) * sol).sum(-1)
            logdet = logdet + 2 * chol.diagonal(dim1=-2, dim2=-1).log().sum(-1)
        return -0.5 * (self.dim * math.log(2 * math.pi) + logdet + quad)

    def covariance_dense(self) -> torch.Tensor:
        if self.dim > 4096:
            raise ValueError("refusing to materialize a covariance with d > 4096")
        cov = self.factor @ self.factor.transpose(-1, -2) + torch.diag_embed(self.diag)
        return 0.5 * (cov + cov.transpose(-1, -2))

    def detach(self) -> "LowRankGaussian":
        return LowRankGaussian(self.mu.detach(), self.factor.detach(), self.diag.detach())

    def __getitem__(self, idx) -> "LowRankGaussian":
        return LowRankGaussian(self.mu[idx], self.factor[idx], self.diag[idx])
