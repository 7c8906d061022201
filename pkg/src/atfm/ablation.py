"""Desk-scale ablation: stage-1-only sampling vs the full two-stage model.

For one seed this trains a GTR, then two ST-Nets (with and without the Dice
term) on a synthetic training set, and scores a held-out set generated from a
disjoint seed.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from .evaluation import evaluate
from .gtr_training import GtrTrainConfig, train_gtr
from .nets import NetConfig
from .sfm import SfmTrainConfig, train_sfm
from .synthdata import SynthConfig, generate_dataset

HELD_OUT_OFFSET = 1000


@dataclass
class DeskRecipe:
    train_count: int = 200
    test_count: int = 50
    size: int = 32
    gtr_epochs: int = 30
    gtr_lr: float = 1e-4
    sfm_epochs: int = 60
    sfm_lr: float = 1e-4
    alpha: float = 1e-3
    coupling: str = "ot"
    steps: tuple = (1, 25, 50)
    n_ged: int = 16
    n_hm: int = 32
    net: NetConfig = field(default_factory=NetConfig)


def run_seed(seed: int, recipe: DeskRecipe | None = None) -> dict:
    """Metrics for one seed; all numbers are held-out dataset means of a single run."""
    r = recipe or DeskRecipe()
    start = time.perf_counter()
    train = generate_dataset(SynthConfig(count=r.train_count, size=r.size, seed=seed))
    test = generate_dataset(SynthConfig(count=r.test_count, size=r.size, seed=HELD_OUT_OFFSET + seed))
    net = NetConfig(**{**r.net.to_dict(), "image_size": r.size})
    gtr = train_gtr(train, GtrTrainConfig(epochs=r.gtr_epochs, lr=r.gtr_lr, seed=seed), net)

    def sfm(alpha):
        cfg = SfmTrainConfig(epochs=r.sfm_epochs, lr=r.sfm_lr, alpha=alpha, seed=seed, coupling=r.coupling)
        return train_sfm(train, gtr, cfg, net)

    def score(stnet, n, steps, metric):
        rep = evaluate(test, gtr, stnet, n=n, steps=steps, runs=1, seed=seed, metric_names=(metric,))
        return rep[f"{metric}_{n}"]["mean"]

    full, plain = sfm(r.alpha), sfm(0.0)
    out = {
        "seed": seed,
        "act_gtr_ged": score(None, r.n_ged, 0, "ged"),
        "ged_by_steps": {k: score(full, r.n_ged, k, "ged") for k in r.steps},
        "hm_iou_alpha": score(full, r.n_hm, 25, "hm_iou"),
        "hm_iou_no_dice": score(plain, r.n_hm, 25, "hm_iou"),
    }
    out["seconds"] = time.perf_counter() - start
    return out


def recipe_dict(recipe: DeskRecipe) -> dict:
    d = asdict(recipe)
    d["net"] = recipe.net.to_dict()
    return d
