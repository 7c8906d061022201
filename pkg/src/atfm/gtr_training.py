"""Training of the truncation Gaussian with the Monte-Carlo prior loss."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .lowrank import LowRankGaussian, derive_seed, make_generator
from .nets import GTR, NetConfig, ParameterStore
from .synthdata import AnnotatedSample

log = logging.getLogger(__name__)

ESTIMATORS = ("mean", "marginal")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class GtrTrainConfig:
    mc_samples: int = 20
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    estimator: str = "marginal"

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    grad_norm: float
    wall_seconds: float
    mean_fm: float | None = None


def pixel_nll(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel Bernoulli negative log-likelihood of ``mask`` under sigmoid(logits)."""
    return F.softplus(logits) - mask * logits


def prior_loss(
    dist: LowRankGaussian,
    mask,
    mc_samples: int,
    rng: torch.Generator | int,
    estimator: str = "mean",
) -> torch.Tensor:
    """Monte-Carlo prior loss for a (possibly batched) truncation Gaussian.

    ``estimator="mean"`` averages the pixel-averaged NLL over the draws.
    ``estimator="marginal"`` instead estimates the negative log of the
    averaged likelihood, ``-log(1/M sum_i p(Y | x_i))``, divided by the pixel
    count; it is the tighter, mode-seeking form used by low-rank
    segmentation heads.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask, dtype=dist.mu.dtype)
    mask = mask.reshape(*dist.batch_shape, -1)
    if mask.shape[-1] != dist.dim:
        raise ValueError(f"mask has {mask.shape[-1]} pixels, distribution has {dist.dim}")
    samples = dist.sample(rng, mc_samples)
    nll = pixel_nll(samples, mask)
    if estimator == "mean":
        return nll.mean()
    if estimator == "marginal":
        total = -nll.sum(-1)
        log_lik = torch.logsumexp(total, 0) - math.log(mc_samples)
        return (-log_lik / dist.dim).mean()
    raise ValueError(f"unknown estimator {estimator!r}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_gtr(
    dataset: Sequence[AnnotatedSample],
    config: GtrTrainConfig,
    net: NetConfig,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> ParameterStore:
    """Fit the truncation Gaussian; returns a frozen store. Deterministic in ``config.seed``."""
    if not dataset:
        raise ValueError("dataset is empty")
    size = dataset[0].image.shape
    if size != (net.image_size, net.image_size):
        raise ValueError(f"dataset images {size} do not match image_size {net.image_size}")
    store = ParameterStore.init(GTR, net, derive_seed(config.seed, 1))
    module = store.build(torch.float32)
    opt = torch.optim.Adam(module.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(derive_seed(config.seed, 2))
    noise = make_generator(derive_seed(config.seed, 3))
    images = torch.as_tensor(np.stack([s.image for s in dataset]), dtype=torch.float32)

    step = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        losses, norms = [], []
        for idx in _batches(len(dataset), config.batch_size, order_rng):
            picks = [dataset[i].masks[order_rng.integers(dataset[i].n_annotations)] for i in idx]
            target = torch.as_tensor(np.stack(picks), dtype=torch.float32)
            dist = module(images[idx][:, None])
            loss = prior_loss(dist, target, config.mc_samples, noise, config.estimator)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite prior loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            norm = torch.sqrt(sum((p.grad**2).sum() for p in module.parameters() if p.grad is not None))
            opt.step()
            step += 1
            losses.append(loss.item())
            norms.append(norm.item())
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(norms)), time.perf_counter() - start)
        log.debug("gtr epoch %d loss %.5f", epoch, stats.mean_loss)
        if on_epoch is not None:
            on_epoch(stats)

    try:
        store.update_from(module)
    except FloatingPointError as exc:
        raise DivergenceError(str(exc)) from exc
    store.meta.update(step=step, epochs=config.epochs, train=asdict(config))
    return store.freeze()
