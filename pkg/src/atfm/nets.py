"""Networks: the truncation-Gaussian encoder-decoder and the time-conditioned velocity net.

Both are small U-Nets built from smooth activations (SiLU) and average
pooling so that finite-difference gradient checks are sharp. Parameters live
in a :class:`ParameterStore` (float32 arrays keyed by name); forward passes
rebuild a module from the store, so they never mutate hidden state.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .lowrank import DIAG_FLOOR, LowRankGaussian

GTR = "gtr"
STNET = "stnet"


class FrozenError(RuntimeError):
    """Raised when something tries to update a frozen parameter store."""


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    widths: tuple = (16, 32, 64)
    rank: int = 10
    time_dim: int = 32
    logit_scale: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty list of positive integers")
        if self.image_size % 2 ** (len(self.widths) - 1):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{len(self.widths) - 1}"
            )
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be an even integer >= 2")
        if not self.logit_scale > 0:
            raise ValueError("logit_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class GtrNet(nn.Module):
    """Encoder-decoder with mean, low-rank factor and diagonal 1x1 heads."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.down = nn.ModuleList()
        cin = 1
        for c in w:
            self.down.append(_ConvBlock(cin, c))
            cin = c
        self.upconv = nn.ModuleList()
        self.up = nn.ModuleList()
        for c_hi, c_lo in zip(w[::-1][:-1], w[::-1][1:]):
            self.upconv.append(nn.ConvTranspose2d(c_hi, c_lo, 2, stride=2))
            self.up.append(_ConvBlock(2 * c_lo, c_lo))
        self.mean_head = nn.Conv2d(w[0], 1, 1)
        self.factor_head = nn.Conv2d(w[0], config.rank, 1)
        self.diag_head = nn.Conv2d(w[0], 1, 1)
        with torch.no_grad():
            self.factor_head.weight.mul_(0.1)

    def features(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.avg_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for upconv, block, skip in zip(self.upconv, self.up, skips[-2::-1]):
            x = block(torch.cat([upconv(x), skip], 1))
        return x

    def forward(self, image) -> LowRankGaussian:
        z = self.features(image)
        b = z.shape[0]
        mu = self.mean_head(z).reshape(b, -1)
        factor = self.factor_head(z).reshape(b, self.config.rank, -1).transpose(1, 2)
        diag = F.softplus(self.diag_head(z).reshape(b, -1)) + DIAG_FLOOR
        return LowRankGaussian(mu, factor, diag)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1]; shape ``(*t.shape, dim)``."""
    t = torch.as_tensor(t, dtype=torch.get_default_dtype()) if not isinstance(t, torch.Tensor) else t
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], -1)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class STNet(nn.Module):
    """Time-conditioned residual U-Net predicting the velocity field."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = config.widths
        tdim = 4 * config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.inp = nn.Conv2d(1, w[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cin = w[0]
        for i, c in enumerate(w):
            self.enc.append(_ResBlock(cin, c, tdim))
            cin = c
            if i < len(w) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = _ResBlock(w[-1], w[-1], tdim)
        self.upsample = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c_hi, c_lo in zip(w[::-1][:-1], w[::-1][1:]):
            self.upsample.append(nn.ConvTranspose2d(c_hi, c_lo, 2, stride=2))
            self.dec.append(_ResBlock(2 * c_lo, c_lo, tdim))
        self.out_norm = nn.GroupNorm(_groups(w[0]), w[0])
        self.out = nn.Conv2d(w[0], 1, 1)

    def forward(self, x, t):
        """``x`` is ``(B, 1, H, W)``, ``t`` is ``(B,)``."""
        emb = self.time_mlp(time_embedding(t.to(x.dtype), self.config.time_dim))
        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, emb)
            if i < len(self.downsample):
                skips.append(h)
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for up, block, skip in zip(self.upsample, self.dec, skips[::-1]):
            h = block(torch.cat([up(h), skip], 1), emb)
        return self.out(F.silu(self.out_norm(h)))


_BUILDERS = {GTR: GtrNet, STNET: STNet}


@dataclass
class ParameterStore:
    """Named float32 parameter arrays plus architecture config and training metadata."""

    kind: str
    config: NetConfig
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _BUILDERS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}
        self.meta.setdefault("step", 0)
        self.meta.setdefault("frozen", False)
        self._cache = {}

    @classmethod
    def init(cls, kind: str, config: NetConfig, seed: int) -> "ParameterStore":
        """Deterministic initialization under ``seed``."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = _BUILDERS[kind](config)
        store = cls(kind, config)
        store._assign(module)
        store.meta["init_seed"] = int(seed)
        return store

    @classmethod
    def zeros(cls, kind: str, config: NetConfig) -> "ParameterStore":
        template = cls.init(kind, config, 0)
        return cls(kind, config, {k: np.zeros_like(v) for k, v in template.tensors.items()})

    @property
    def frozen(self) -> bool:
        return bool(self.meta.get("frozen"))

    def freeze(self):
        self.meta["frozen"] = True
        return self

    def names(self) -> list:
        return list(self.tensors)

    def shapes(self) -> dict:
        return {k: list(v.shape) for k, v in self.tensors.items()}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()

    def config_hash(self) -> str:
        text = repr((self.kind, sorted(self.config.to_dict().items())))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def build(self, dtype=torch.float32) -> nn.Module:
        """A new trainable module holding a copy of the stored values."""
        module = _BUILDERS[self.kind](self.config).to(dtype)
        state = {k: torch.from_numpy(v.copy()).to(dtype) for k, v in self.tensors.items()}
        module.load_state_dict(state, strict=True)
        return module

    def module(self, dtype=torch.float32) -> nn.Module:
        """Read-only module for inference, cached per dtype."""
        if dtype not in self._cache:
            self._cache[dtype] = self.build(dtype).requires_grad_(False).eval()
        return self._cache[dtype]

    def _assign(self, module: nn.Module):
        values = {}
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype(np.float32)
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"non-finite values in parameter {name!r}")
            if name in self.tensors and self.tensors[name].shape != arr.shape:
                raise ValueError(f"shape of {name!r} changed")
            values[name] = arr
        self.tensors = values
        self._cache = {}

    def update_from(self, module: nn.Module):
        """Copy trained values back in; refuses when frozen, checks finiteness."""
        if self.frozen:
            raise FrozenError(f"{self.kind} parameters are frozen")
        self._assign(module)

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.kind, self.config, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))


def _image_batch(image, config: NetConfig, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image, dtype=dtype)
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        x = x[:, None]
    if tuple(x.shape[-2:]) != (config.image_size, config.image_size):
        raise ValueError(f"image shape {tuple(x.shape[-2:])} does not match configured size {config.image_size}")
    return x


def gtr_forward(params: ParameterStore, image, dtype=torch.float32) -> LowRankGaussian:
    """Truncation Gaussian for an image ``(H, W)`` or a batch ``(B, H, W)``.

    A single image yields an unbatched distribution over ``d = H * W`` logits.
    """
    if params.kind != GTR:
        raise ValueError("gtr_forward needs GTR parameters")
    x = _image_batch(image, params.config, dtype)
    with torch.no_grad():
        dist = params.module(dtype)(x)
    single = not isinstance(image, torch.Tensor) and np.asarray(image).ndim == 2
    single = single or (isinstance(image, torch.Tensor) and image.dim() == 2)
    return dist[0] if single else dist


def stnet_forward(params: ParameterStore, x_t, t, dtype=torch.float32) -> torch.Tensor:
    """Velocity for a logit map ``(H, W)`` or batch ``(B, H, W)`` at time(s) ``t``."""
    if params.kind != STNET:
        raise ValueError("stnet_forward needs ST-Net parameters")
    x = torch.as_tensor(x_t, dtype=dtype)
    single = x.dim() == 2
    xb = _image_batch(x, params.config, dtype)
    t = torch.as_tensor(t, dtype=dtype).reshape(-1)
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    if t.numel() == 1:
        t = t.expand(xb.shape[0])
    with torch.no_grad():
        v = params.module(dtype)(xb, t)[:, 0]
    return v[0] if single else v


def grad_check(
    loss_fn: Callable[[nn.Module], torch.Tensor],
    module: nn.Module,
    probes: int = 20,
    eps: float = 1e-4,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> float:
    """Max relative error between autograd and central differences on random scalars.

    ``loss_fn(module)`` must be deterministic. The module should be in float64.
    Relative error is ``|a - fd| / max(|a|, |fd|, abs_floor)``.
    """
    params = [p for p in module.parameters()]
    for p in params:
        p.requires_grad_(True)
        p.grad = None
    loss = loss_fn(module)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            idx = int(rng.integers(sizes[k]))
            flat = params[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn(module).item()
            flat[idx] = orig - eps
            down = loss_fn(module).item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = grads[k].view(-1)[idx].item()
            err = abs(an - fd) / max(abs(an), abs(fd), abs_floor)
            worst = max(worst, err)
    return worst
