"""Synthetic multi-annotator segmentation data and its on-disk format.

Each sample is a blurred, noisy image of a lumpy ellipse. Every rater has a
fixed style (grow/shrink radius and a shift direction) plus a little
per-sample jitter, and with some probability marks nothing at all.

On disk a dataset is a directory with ``manifest.json`` and one
sub-directory per sample holding ``image.pgm`` and ``mask_<k>.pgm``.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Problem reading or writing a dataset directory."""

    def __init__(self, message: str, path: str | Path | None = None, sample_id: str | None = None):
        self.path = str(path) if path is not None else None
        self.sample_id = sample_id
        detail = message
        if sample_id is not None:
            detail += f" (sample {sample_id!r})"
        if path is not None:
            detail += f": {path}"
        super().__init__(detail)


@dataclass
class AnnotatedSample:
    image: np.ndarray  # (H, W) float in [0, 1]
    masks: np.ndarray  # (N, H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.masks.ndim == 2:
            self.masks = self.masks[None]
        if self.image.ndim != 2:
            raise ValueError("image must be a 2-D map")
        if self.masks.ndim != 3 or self.masks.shape[1:] != self.image.shape or len(self.masks) < 1:
            raise ValueError(f"masks of shape {self.masks.shape} do not match image {self.image.shape}")
        if self.masks.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def n_annotations(self) -> int:
        return len(self.masks)


@dataclass
class SynthConfig:
    count: int = 200
    size: int = 32
    annotators: int = 4
    radius_range: tuple = (0.16, 0.3)  # fraction of the image size
    # rater perturbations, all as fractions of the image size
    bias_radius: float = 0.05  # largest systematic grow/shrink
    bias_shift: float = 0.03  # systematic shift length
    jitter: float = 0.015  # per-sample random perturbation
    empty_prob: float = 0.25
    blur: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.radius_range = tuple(float(r) for r in self.radius_range)
        self.validate()

    def validate(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.size < 8:
            raise ValueError(f"size must be >= 8, got {self.size}")
        if self.annotators < 1:
            raise ValueError("annotators must be >= 1")
        if not 0 <= self.empty_prob <= 1:
            raise ValueError("empty_prob must lie in [0, 1]")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must satisfy 0 < low <= high")
        for name in ("bias_radius", "bias_shift", "jitter", "blur", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        # the largest region plus rater growth and shift must fit
        if hi + self.bias_radius + self.bias_shift + 2 * self.jitter >= 0.5:
            raise ValueError("region larger than image: reduce radius_range or bias magnitudes")


def _rater_styles(config: SynthConfig):
    n = config.annotators
    rng = np.random.default_rng([config.seed, 0xA7])
    grow = np.linspace(-config.bias_radius, config.bias_radius, n) if n > 1 else np.zeros(1)
    angles = 2 * np.pi * (np.arange(n) / n) + rng.uniform(0, 2 * np.pi)
    shifts = config.bias_shift * np.stack([np.cos(angles), np.sin(angles)], 1)
    return grow * config.size, shifts * config.size


def _lumpy_ellipse(size: int, rng, config: SynthConfig) -> np.ndarray:
    """Signed level function; the region is where it is positive (in pixels)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    lo, hi = config.radius_range
    ra, rb = rng.uniform(lo, hi, 2) * size
    theta = rng.uniform(0, np.pi)
    margin = max(ra, rb) * 1.1
    cy, cx = size / 2 + rng.uniform(-1, 1, 2) * max(0.0, size / 2 - margin - 2) * 0.3
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    phi = np.arctan2(v / rb, u / ra)
    harmonics = sum(
        rng.normal(0, 0.08) * np.cos(k * phi + rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)
    )
    r_norm = np.sqrt((u / ra) ** 2 + (v / rb) ** 2)
    # scale back to approximately pixel units so thresholds behave like radii
    return (1 + harmonics - r_norm) * min(ra, rb)


def _make_sample(index: int, config: SynthConfig, grow, shifts) -> AnnotatedSample:
    rng = np.random.default_rng([config.seed, index])
    level = _lumpy_ellipse(config.size, rng, config)
    base = level > 0
    masks = []
    for k in range(config.annotators):
        jitter = config.jitter * config.size
        offset = grow[k] + rng.normal(0, jitter)
        shift = shifts[k] + rng.normal(0, jitter, 2)
        moved = ndimage.shift(level, shift, order=1, mode="nearest")
        mask = moved + offset > 0
        if rng.random() < config.empty_prob:
            mask = np.zeros_like(mask)
        masks.append(mask)
    image = ndimage.gaussian_filter(base.astype(float), config.blur) if config.blur > 0 else base.astype(float)
    image = 0.2 + 0.6 * image + rng.normal(0, config.noise, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return AnnotatedSample(image=image, masks=np.asarray(masks, dtype=np.uint8), id=f"s{index:05d}")


def generate_dataset(config: SynthConfig) -> list[AnnotatedSample]:
    config.validate()
    grow, shifts = _rater_styles(config)
    return [_make_sample(i, config, grow, shifts) for i in range(config.count)]


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit) I/O

_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path: str | Path, data: np.ndarray):
    data = np.asarray(data)
    if data.ndim != 2 or data.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read file ({exc.strerror})", path) from exc
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise DatasetError("not a binary PGM file", path)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DatasetError(f"unsupported maxval {maxval}", path)
    body = raw[m.end():]
    if len(body) != w * h:
        raise DatasetError(f"truncated or oversized pixel data ({len(body)} of {w * h} bytes)", path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_dataset(samples: list[AnnotatedSample], directory: str | Path, config: SynthConfig | None = None):
    directory = Path(directory)
    if not samples:
        raise DatasetError("refusing to save an empty dataset", directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for s in samples:
            sdir = directory / s.id
            sdir.mkdir(exist_ok=True)
            write_pgm(sdir / "image.pgm", image_to_u8(s.image))
            for k, m in enumerate(s.masks):
                write_pgm(sdir / f"mask_{k}.pgm", (m * 255).astype(np.uint8))
        manifest = {
            "format": FORMAT_VERSION,
            "size": list(samples[0].image.shape),
            "annotators": samples[0].n_annotations,
            "seed": config.seed if config is not None else None,
            "config": asdict(config) if config is not None else None,
            "samples": [{"id": s.id, "annotators": s.n_annotations} for s in samples],
        }
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset ({exc.strerror})", exc.filename or directory) from exc


def load_dataset(directory: str | Path) -> list[AnnotatedSample]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise DatasetError("missing manifest", mpath)
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["samples"]
        size = tuple(manifest["size"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest ({exc})", mpath) from exc
    listed = {e["id"] for e in entries}
    on_disk = {p.name for p in directory.iterdir() if p.is_dir()}
    extra = sorted(on_disk - listed)
    if extra:
        raise DatasetError(f"sample directories not in manifest: {extra}", directory)
    samples = []
    for entry in entries:
        sid = entry["id"]
        sdir = directory / sid
        if not sdir.is_dir():
            raise DatasetError("sample listed in manifest is missing", sdir, sample_id=sid)
        image = read_pgm(sdir / "image.pgm").astype(np.float64) / 255.0
        masks = []
        for k in range(int(entry["annotators"])):
            raw = read_pgm(sdir / f"mask_{k}.pgm")
            if not np.isin(raw, (0, 255)).all():
                raise DatasetError("mask is not binary", sdir / f"mask_{k}.pgm", sample_id=sid)
            masks.append(raw // 255)
        if image.shape != size:
            raise DatasetError(f"image shape {image.shape} != manifest size {size}", sdir, sample_id=sid)
        try:
            samples.append(AnnotatedSample(image=image, masks=np.asarray(masks), id=sid))
        except ValueError as exc:
            raise DatasetError(str(exc), sdir, sample_id=sid) from exc
    return samples


def summarize(samples: list[AnnotatedSample]) -> dict:
    from .metrics import iou_matrix

    empty = np.mean([[m.sum() == 0 for m in s.masks] for s in samples])
    pair_ious = []
    for s in samples:
        keep = [m for m in s.masks if m.any()]
        if len(keep) >= 2:
            mat = iou_matrix(keep, keep)
            iu = np.triu_indices(len(keep), 1)
            pair_ious.extend(mat[iu].tolist())
    return {
        "count": len(samples),
        "size": list(samples[0].image.shape),
        "annotators": samples[0].n_annotations,
        "empty_rate": float(empty),
        "mean_pairwise_iou": float(np.mean(pair_ious)) if pair_ious else float("nan"),
    }


__all__ = [
    "AnnotatedSample",
    "DatasetError",
    "SynthConfig",
    "generate_dataset",
    "load_dataset",
    "read_pgm",
    "save_dataset",
    "summarize",
    "write_pgm",
]
