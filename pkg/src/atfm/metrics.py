"""Evaluation metrics for sets of predicted and ground-truth binary masks.

Conventions: two empty masks have IoU = Dice = 1 (distance 0), and the
within-set GED expectations include identical-index pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

HM_IOU_CAP = 256


def _stack(masks) -> np.ndarray:
    arr = np.asarray([np.asarray(m) for m in masks])
    if arr.ndim < 2 or len(arr) == 0:
        raise ValueError("expected a non-empty list of masks")
    return arr.reshape(len(arr), -1).astype(bool)


def _pair_counts(a: np.ndarray, b: np.ndarray):
    af, bf = a.astype(np.float64), b.astype(np.float64)
    inter = af @ bf.T
    sa, sb = af.sum(1), bf.sum(1)
    return inter, sa[:, None], sb[None, :]


def iou_matrix(preds, gts) -> np.ndarray:
    a, b = _stack(preds), _stack(gts)
    if a.shape[1] != b.shape[1]:
        raise ValueError("mask shapes differ")
    inter, sa, sb = _pair_counts(a, b)
    union = sa + sb - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 1.0)
    return out


def dice_matrix(preds, gts) -> np.ndarray:
    a, b = _stack(preds), _stack(gts)
    if a.shape[1] != b.shape[1]:
        raise ValueError("mask shapes differ")
    inter, sa, sb = _pair_counts(a, b)
    denom = sa + sb
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, 2 * inter / denom, 1.0)
    return out


def iou(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(iou_matrix([a], [b])[0, 0])


def dice(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(dice_matrix([a], [b])[0, 0])


def ged(preds, gts) -> float:
    """Generalized energy distance under d = 1 - IoU."""
    cross = 1 - iou_matrix(preds, gts)
    within_p = 1 - iou_matrix(preds, preds)
    within_g = 1 - iou_matrix(gts, gts)
    return float(2 * cross.mean() - within_p.mean() - within_g.mean())


def hungarian(score, maximize: bool = False) -> np.ndarray:
    """Optimal assignment for a square matrix; returns ``perm`` with row i -> column perm[i].

    Shortest-augmenting-path Kuhn-Munkres with row/column potentials, O(C^3).
    """
    cost = np.asarray(score, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"score matrix must be square, got shape {cost.shape}")
    if maximize:
        cost = -cost
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[j]: 1-based row matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    perm = np.empty(n, dtype=int)
    perm[owner[1:] - 1] = np.arange(n)
    return perm


def hm_iou(preds, gts, cap: int = HM_IOU_CAP) -> float:
    """Mean IoU under the optimal matching after replicating both sets to lcm(n, m)."""
    n, m = len(preds), len(gts)
    if n < 1 or m < 1:
        raise ValueError("expected non-empty prediction and ground-truth lists")
    c = math.lcm(n, m)
    if c > cap:
        raise ValueError(f"lcm({n}, {m}) = {c} exceeds the cap of {cap}")
    base = iou_matrix(preds, gts)
    scores = np.repeat(np.repeat(base, c // n, axis=0), c // m, axis=1)
    perm = hungarian(scores, maximize=True)
    return float(scores[np.arange(c), perm].mean())


def mdm(preds, gts) -> float:
    """Best Dice per ground truth, averaged over ground truths."""
    return float(dice_matrix(preds, gts).max(axis=0).mean())


@dataclass
class MetricsReport:
    ged: float
    hm_iou: float
    mdm: float
    n_predictions: int
    n_ground_truths: int
    seed: int | None = None
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ged_n": self.ged,
            "hm_iou_n": self.hm_iou,
            "mdm_n": self.mdm,
            "n": self.n_predictions,
            "m": self.n_ground_truths,
            "seed": self.seed,
            "per_sample": self.per_sample,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def evaluate_sets(preds, gts, seed: int | None = None) -> MetricsReport:
    """All three metrics for one prediction set against one ground-truth set."""
    return MetricsReport(
        ged=ged(preds, gts),
        hm_iou=hm_iou(preds, gts),
        mdm=mdm(preds, gts),
        n_predictions=len(preds),
        n_ground_truths=len(gts),
        seed=seed,
    )


__all__ = [
    "MetricsReport",
    "dice",
    "dice_matrix",
    "evaluate_sets",
    "ged",
    "hm_iou",
    "hungarian",
    "iou",
    "iou_matrix",
    "mdm",
]
