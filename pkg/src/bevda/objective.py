"""Multi-space feature imitation and the weighted adaptation objective."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .geometry import SpaceFeatures

MKT_SPACES = ("image", "voxel", "bev")


@dataclass
class LossWeights:
    unsupervised: float = 1.0  # pseudo-labelled target detection
    supervised: float = 1.0    # labelled source detection
    transfer: float = 0.1      # teacher -> student feature imitation
    alignment: float = 0.1     # adversarial prototype alignment

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


def _space_term(t: torch.Tensor, s: torch.Tensor, channel_dim: int, spatial_dims: tuple[int, ...]) -> torch.Tensor:
    sq = ((t - s) ** 2).sum(dim=channel_dim, keepdim=True)
    n = math.prod(t.shape[d] for d in spatial_dims)
    return sq.sum(dim=spatial_dims) / n


def loss_mkt(teacher: SpaceFeatures, student: SpaceFeatures, spaces=MKT_SPACES) -> torch.Tensor:
    """Per enabled space: squared channel distance summed over locations, divided by the
    number of locations; summed over spaces and averaged over the batch.

    Image space normalizes per view by H'*W' and sums over views; voxel uses all X*Y*Z
    cells; BEV uses X*Y. The teacher side is detached.
    """
    total = None
    for name in spaces:
        if name not in MKT_SPACES:
            raise ValueError(f"unknown space {name!r}")
        t = getattr(teacher, name).detach()
        s = getattr(student, name)
        if t.shape != s.shape:
            raise ValueError(f"{name} feature shapes differ: {tuple(t.shape)} vs {tuple(s.shape)}")
        if name == "image":      # (B, M, C, H', W')
            term = _space_term(t, s, 2, (3, 4)).flatten(1).sum(1)
        elif name == "voxel":    # (B, C, X, Y, Z)
            term = _space_term(t, s, 1, (2, 3, 4)).flatten(1).sum(1)
        else:                    # (B, C, X, Y)
            term = _space_term(t, s, 1, (2, 3)).flatten(1).sum(1)
        total = term if total is None else total + term
    if total is None:
        return student.bev.sum() * 0.0
    return total.mean()


def loss_total(l_uns, l_sup, l_mkt, l_gas, weights: LossWeights | None = None) -> torch.Tensor:
    """weights.unsupervised * l_uns + supervised * l_sup + transfer * l_mkt + alignment * l_gas."""
    w = weights or LossWeights()
    parts = {"L_UNS": l_uns, "L_SUP": l_sup, "L_MKT": l_mkt, "L_GAS": l_gas}
    for name, v in parts.items():
        x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(x):
            raise ValueError(f"non-finite loss component {name}: {x}")
    return (w.unsupervised * l_uns + w.supervised * l_sup
            + w.transfer * l_mkt + w.alignment * l_gas)
