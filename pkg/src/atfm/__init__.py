"""Truncated flow matching for ambiguous segmentation.

A low-rank Gaussian prior network (GTR) is trained on annotator masks, and a
time-conditioned U-Net (ST-Net) then transports draws from that prior onto
mask logits along straight flows.
"""

from .lowrank import LowRankGaussian, derive_seed, make_generator
from .metrics import ged, hm_iou, mdm
from .nets import GTR, STNET, NetConfig, ParameterStore
from .schedule import Schedule, find_truncation_time, truncation_factorization

__version__ = "0.1.0"

__all__ = [
    "GTR",
    "STNET",
    "LowRankGaussian",
    "NetConfig",
    "ParameterStore",
    "Schedule",
    "derive_seed",
    "find_truncation_time",
    "ged",
    "hm_iou",
    "make_generator",
    "mdm",
    "truncation_factorization",
]
