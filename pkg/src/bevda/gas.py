"""Geometric-space alignment: shared multi-space embedding, per-domain prototypes and an
adversarial domain discriminator behind a gradient-reversal boundary."""
from __future__ import annotations

import torch
from torch import nn

from .geometry import SpaceFeatures

SPACES = ("image", "voxel", "bev")
EMBED_DIM = 256
CLAMP_EPS = 1e-7


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight):
        ctx.weight = weight
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.weight, None


def grad_reverse(x: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    return GradReverse.apply(x, weight)


def _mlp(cin, hidden, cout):
    return nn.Sequential(nn.Linear(cin, hidden), nn.ReLU(), nn.Linear(hidden, cout))


class AlignmentParams(nn.Module):
    def __init__(self, channels: dict[str, int], num_classes: int = 1, embed_dim: int = EMBED_DIM,
                 hidden: int = 256):
        super().__init__()
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.projectors = nn.ModuleDict({
            s: _mlp(channels[s], hidden, embed_dim * num_classes) for s in SPACES
        })
        self.aggregator = _mlp(3 * embed_dim, hidden, embed_dim)
        self.discriminator = _mlp(embed_dim * num_classes, 128, 1)

    def discriminate(self, prototype: torch.Tensor) -> torch.Tensor:
        """prototype (..., 256, n) -> probability (...) of being source."""
        return torch.sigmoid(self.discriminator(prototype.flatten(-2)).squeeze(-1))


def pool_spaces(spaces: SpaceFeatures) -> dict[str, torch.Tensor]:
    """Global average pool each space to a (B, C) channel vector."""
    return {
        "image": spaces.image.mean(dim=(1, 3, 4)),
        "voxel": spaces.voxel.mean(dim=(2, 3, 4)),
        "bev": spaces.bev.mean(dim=(2, 3)),
    }


def build_embedding(spaces: SpaceFeatures, align: AlignmentParams, enabled=SPACES,
                    reverse_weight: float | None = None) -> torch.Tensor:
    """(B, 3, 256, n) shared embedding; disabled spaces occupy a zero slot.

    With ``reverse_weight`` the pooled features pass through a gradient-reversal layer, so
    everything downstream (projectors, aggregator, discriminator) learns to tell the
    domains apart while the detector features upstream learn to hide them.
    """
    pooled = pool_spaces(spaces)
    if reverse_weight is not None:
        pooled = {k: grad_reverse(v, reverse_weight) for k, v in pooled.items()}
    B = spaces.bev.shape[0]
    slots = []
    for s in SPACES:
        if s in enabled:
            slots.append(align.projectors[s](pooled[s]).reshape(B, align.embed_dim, align.num_classes))
        else:
            slots.append(pooled[s].new_zeros((B, align.embed_dim, align.num_classes)))
    return torch.stack(slots, dim=1)


def aggregate_prototype(embedding: torch.Tensor, align: AlignmentParams) -> torch.Tensor:
    """(B, 3, C, n) -> (B, 256, n): per category column, concat the 3 slots and apply
    the shared aggregator."""
    B, S, C, n = embedding.shape
    if S != 3:
        raise ValueError(f"embedding must have 3 space slots, got {S}")
    cols = embedding.permute(0, 3, 1, 2).reshape(B, n, S * C)
    return align.aggregator(cols).permute(0, 2, 1)


def loss_gas(f_source: torch.Tensor, f_target: torch.Tensor, align: AlignmentParams) -> torch.Tensor:
    """log D(F_s) + log(1 - D(F_t)), averaged over any leading batch dims.

    Discriminator outputs are clamped to [eps, 1-eps] so the value stays finite.
    """
    d_s = align.discriminate(f_source).clamp(CLAMP_EPS, 1 - CLAMP_EPS)
    d_t = align.discriminate(f_target).clamp(CLAMP_EPS, 1 - CLAMP_EPS)
    return torch.log(d_s).mean() + torch.log(1 - d_t).mean()


def domain_prototypes(spaces: SpaceFeatures, align: AlignmentParams, enabled=SPACES,
                      reverse_weight: float | None = None) -> torch.Tensor:
    return aggregate_prototype(build_embedding(spaces, align, enabled, reverse_weight), align)
