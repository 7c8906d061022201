"""Segmentation flow matching and two-stage sampling.

Training moves along the straight path from a truncation-Gaussian draw
``x0`` to the logit encoding ``x1`` of one annotation, regressing the
constant velocity ``x1 - x0`` and adding a soft-Dice penalty on the
endpoint projected from every intermediate state against all annotations.
Sampling draws from the frozen truncation Gaussian and Euler-integrates the
learned velocity to ``t = 1``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .gtr_training import DivergenceError, EpochStats
from .lowrank import derive_seed, make_generator
from .metrics import hungarian
from .nets import GTR, STNET, NetConfig, ParameterStore, gtr_forward
from .synthdata import AnnotatedSample

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
EVAL_CHUNK = 256
COUPLINGS = ("independent", "ot")


@dataclass(frozen=True)
class FlowState:
    x: torch.Tensor
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if not bool(torch.isfinite(torch.as_tensor(self.x)).all()):
            raise ValueError("state contains non-finite values")


@dataclass
class SfmTrainConfig:
    alpha: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    steps: int = 25
    seed: int = 0
    grad_stop: float | None = None
    coupling: str = "ot"

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.grad_stop is not None and not self.grad_stop > 0:
            raise ValueError("grad_stop must be positive when given")


def _tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def _time_like(t, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch time against maps of shape (..., H, W)."""
    t = _tensor(t, x.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(*t.shape, *([1] * (x.dim() - t.dim())))


def encode_logits(mask, c: float) -> torch.Tensor:
    """+c on foreground, -c on background."""
    if not c > 0:
        raise ValueError("logit magnitude c must be positive")
    m = _tensor(mask)
    return c * (2 * m.to(torch.float64 if not m.is_floating_point() else m.dtype) - 1)


def ot_interpolate(x0, x1, t) -> torch.Tensor:
    x0, x1 = _tensor(x0), _tensor(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    tt = _time_like(t, x0)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    return tt * x1 + (1 - tt) * x0


def endpoint_projection(x_t, velocity, t, t_trunc: float = 0.0, horizon: float = 1.0) -> torch.Tensor:
    """Project from ``x_t`` along ``velocity`` to the end of the path.

    The general coefficient is ``(horizon - t) / (horizon - t_trunc)``, which is
    ``1 - t`` on the unit interval.
    """
    x_t, velocity = _tensor(x_t), _tensor(velocity)
    tt = _time_like(t, x_t)
    if bool(((tt < t_trunc) | (tt > horizon)).any()):
        raise ValueError(f"t must lie in [{t_trunc}, {horizon}]")
    if t_trunc == 0.0 and horizon == 1.0:
        return x_t + velocity * (1 - tt)
    return x_t + velocity * ((horizon - tt) / (horizon - t_trunc))


def soft_dice(logits, mask, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice between sigmoid(logits) and a binary mask, reduced over the last two axes."""
    logits = _tensor(logits)
    mask = _tensor(mask, logits.dtype)
    if logits.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(mask.shape)}")
    p = torch.sigmoid(logits)
    inter = (p * mask).sum((-2, -1))
    return (2 * inter + eps) / (p.sum((-2, -1)) + mask.sum((-2, -1)) + eps)


def flow_matching_loss(velocity_pred, x0, x1) -> torch.Tensor:
    velocity_pred, x0, x1 = _tensor(velocity_pred), _tensor(x0), _tensor(x1)
    return ((velocity_pred - (x1 - x0)) ** 2).mean()


def sf_loss(velocity_pred, x0, x1, x_t, t, annotations, alpha: float, return_parts: bool = False):
    """Flow-matching loss plus ``alpha`` times the mean soft-Dice deficit of the projected endpoint.

    Maps are ``(H, W)`` with ``annotations`` ``(N, H, W)``, or batched as
    ``(B, H, W)`` with ``annotations`` ``(B, N, H, W)`` and ``t`` of shape ``(B,)``.
    """
    velocity_pred = _tensor(velocity_pred)
    annotations = _tensor(annotations, velocity_pred.dtype)
    if annotations.dim() == velocity_pred.dim():
        annotations = annotations.unsqueeze(-3)
    if annotations.shape[-3] < 1:
        raise ValueError("need at least one annotation")
    fm = flow_matching_loss(velocity_pred, x0, x1)
    x1t = endpoint_projection(x_t, velocity_pred, t)
    deficit = (1 - soft_dice(x1t.unsqueeze(-3), annotations)).mean(-1).mean()
    total = fm + alpha * deficit
    if return_parts:
        return total, fm, deficit
    return total


def train_sfm(
    dataset: Sequence[AnnotatedSample],
    gtr: ParameterStore,
    config: SfmTrainConfig,
    net: NetConfig,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> ParameterStore:
    """Train the velocity network against a frozen truncation Gaussian."""
    if gtr.kind != GTR:
        raise ValueError("expected GTR parameters")
    if not gtr.frozen:
        raise ValueError("the GTR checkpoint must be frozen before flow-matching training")
    if not dataset:
        raise ValueError("dataset is empty")
    if gtr.config.image_size != net.image_size:
        raise ValueError("GTR and ST-Net image sizes differ")
    c = net.logit_scale
    store = ParameterStore.init(STNET, net, derive_seed(config.seed, 11))
    module = store.build(torch.float32)
    opt = torch.optim.Adam(module.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(derive_seed(config.seed, 12))
    noise = make_generator(derive_seed(config.seed, 13))

    images = np.stack([s.image for s in dataset])
    # the truncation Gaussian is frozen: its parameters per image never change
    trunc = gtr_forward(gtr, images)
    size = net.image_size

    step = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        losses, fms, norms = [], [], []
        order = order_rng.permutation(len(dataset))
        for b in range(0, len(order), config.batch_size):
            idx = order[b : b + config.batch_size]
            annotations = [torch.as_tensor(dataset[i].masks, dtype=torch.float32) for i in idx]
            if config.coupling == "ot":
                x0, x1 = _ot_pairs(trunc, idx, annotations, c, noise, order_rng, size)
            else:
                picks = [order_rng.integers(dataset[i].n_annotations) for i in idx]
                x0 = trunc[torch.as_tensor(idx)].sample(noise, 1)[0].reshape(-1, size, size)
                x1 = torch.stack([encode_logits(a[j], c).float() for a, j in zip(annotations, picks)])
            t = torch.rand(len(idx), generator=noise)
            x_t = ot_interpolate(x0, x1, t)
            v = module(x_t[:, None], t)[:, 0]
            fm = flow_matching_loss(v, x0, x1)
            x1t = endpoint_projection(x_t, v, t)
            # annotation counts may differ between samples
            deficits = torch.stack(
                [(1 - soft_dice(x1t[k].unsqueeze(0), annotations[k])).mean() for k in range(len(idx))]
            )
            loss = fm + config.alpha * deficits.mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite flow-matching loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            norm = torch.sqrt(sum((p.grad**2).sum() for p in module.parameters() if p.grad is not None))
            opt.step()
            step += 1
            losses.append(loss.item())
            fms.append(fm.item())
            norms.append(norm.item())
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(norms)), time.perf_counter() - start)
        stats.mean_fm = float(np.mean(fms))
        log.debug("sfm epoch %d loss %.5f fm %.5f", epoch, stats.mean_loss, stats.mean_fm)
        if on_epoch is not None:
            on_epoch(stats)
        if config.grad_stop is not None and stats.grad_norm < config.grad_stop:
            log.info("gradient norm %.3g below %.3g; stopping", stats.grad_norm, config.grad_stop)
            break

    try:
        store.update_from(module)
    except FloatingPointError as exc:
        raise DivergenceError(str(exc)) from exc
    store.meta.update(step=step, epochs=epoch + 1, train=asdict(config), gtr_hash=gtr.content_hash())
    return store.freeze()


def _ot_pairs(trunc, idx, annotations, c, noise, rng, size):
    """One (draw, target) pair per image from a minimum-cost matching of N draws to N annotations.

    Each annotation is matched to exactly one of N truncation draws by squared
    distance, then one matched pair is kept uniformly at random, so the target
    is still a uniformly chosen annotation.
    """
    x0s, x1s = [], []
    for i, ann in zip(idx, annotations):
        n = len(ann)
        draws = trunc[int(i)].sample(noise, n).reshape(n, size, size)
        targets = encode_logits(ann, c).float()
        cost = ((draws[:, None] - targets[None]) ** 2).flatten(2).sum(-1)
        perm = hungarian(cost.numpy())
        j = int(rng.integers(n))
        x0s.append(draws[int(np.flatnonzero(perm == j)[0])])
        x1s.append(targets[j])
    return torch.stack(x0s), torch.stack(x1s)


def _velocity_fn(stnet) -> Callable:
    if isinstance(stnet, ParameterStore):
        if stnet.kind != STNET:
            raise ValueError("expected ST-Net parameters")
        module = stnet.module(torch.float32)

        def fn(x, t):
            with torch.no_grad():
                return module(x[:, None].float(), t.float())[:, 0].to(x.dtype)

        return fn
    return stnet


def euler_sample(stnet, x0, steps: int) -> torch.Tensor:
    """Integrate dx/dt = v(x, t) from t = 0 to 1 with ``steps`` uniform Euler steps.

    ``stnet`` is a ST-Net :class:`ParameterStore` or any callable ``v(x, t)``
    taking maps ``(B, H, W)`` and times ``(B,)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    fn = _velocity_fn(stnet)
    x = _tensor(x0, torch.float32 if not isinstance(x0, torch.Tensor) else None)
    single = x.dim() == 2
    if single:
        x = x[None]
    h = 1.0 / steps
    for k in range(steps):
        t = torch.full((x.shape[0],), k * h, dtype=x.dtype)
        x = x + h * fn(x, t)
    return x[0] if single else x


def truncation_draws(gtr: ParameterStore, image, n: int, seed: int) -> torch.Tensor:
    """``n`` truncation-point logit maps; draw i uses its own stream (seed, i)."""
    dist = gtr_forward(gtr, image)
    size = gtr.config.image_size
    draws = [dist.sample(make_generator(derive_seed(seed, i)), 1)[0] for i in range(n)]
    return torch.stack(draws).reshape(n, size, size)


def predict_logits(gtr: ParameterStore, stnet, image, n: int, steps: int, seed: int) -> torch.Tensor:
    if gtr.kind != GTR:
        raise ValueError("expected GTR parameters")
    if stnet is not None and isinstance(stnet, ParameterStore) and stnet.config.image_size != gtr.config.image_size:
        raise ValueError("GTR and ST-Net checkpoints have different image sizes")
    x0 = truncation_draws(gtr, image, n, seed)
    if stnet is None:
        return x0
    chunks = [euler_sample(stnet, x0[i : i + EVAL_CHUNK], steps) for i in range(0, n, EVAL_CHUNK)]
    return torch.cat(chunks)


def predict(gtr: ParameterStore, stnet, image, n: int = 16, steps: int = 25, seed: int = 0) -> np.ndarray:
    """Two-stage inference: ``n`` binary masks ``(n, H, W)``.

    ``stnet=None`` skips the flow stage and thresholds the truncation draws.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    logits = predict_logits(gtr, stnet, image, n, steps, seed)
    return (logits > 0).numpy().astype(np.uint8)
