"""Depth-aware teacher: MC-dropout depth uncertainty, lidar/prediction depth composition,
EMA parameter tracking and pseudo-label emission."""
from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import FrustumGrid, SpaceFeatures
from .perception.decode import Detection, decode_detections, detections_to_boxes
from .perception.model import BEVDetector, seeded_generator

log = logging.getLogger(__name__)


class DepthSource(enum.IntEnum):
    NONE = 0
    LIDAR = 1
    PRED = 2


class Gating(str, enum.Enum):
    """How non-lidar pixels qualify for a reliable prediction."""

    LIDAR_ONLY = "lidar"        # no predictions kept
    ALL_PRED = "pred"           # every prediction kept
    CONFIDENCE = "confidence"   # top-q by max bin probability
    UNCERTAINTY = "uncertainty"  # bottom-q by MC-dropout uncertainty


def uncertainty_from_passes(probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """probs (m, ..., D) -> (mean (..., D), U (...)).

    U = sqrt(mean_i ||p_i - mean||^2), the norm taken over the D bins.
    """
    if probs.shape[0] < 2:
        raise ValueError("need at least 2 stochastic passes")
    # centering on the first pass keeps U exactly 0 when all passes agree
    shifted = probs - probs[0]
    offset = shifted.mean(0)
    mu = probs[0] + offset
    u = ((shifted - offset) ** 2).sum(-1).mean(0).sqrt()
    return mu, u


@torch.no_grad()
def mc_uncertainty(model: BEVDetector, images: torch.Tensor, m: int = 10,
                   generator: torch.Generator | None = None, feat: torch.Tensor | None = None):
    """m dropout-active depth passes over images (B, M, 3, H, W).

    Only the layers after the dropout site differ between passes, so the shared trunk is
    evaluated once. Returns (mu (B, M, H', W', D), U (B, M, H', W')).
    """
    if m < 2:
        raise ValueError(f"m must be >= 2, got {m}")
    if feat is None:
        feat = model.encode(images)
    hidden = model.depth_penultimate(feat)
    passes = torch.stack([model.depth_from_penultimate(hidden, True, generator) for _ in range(m)])
    return uncertainty_from_passes(passes)


@dataclass
class DepthAwareMap:
    source: torch.Tensor    # (..., H', W') int8 DepthSource
    depth: torch.Tensor     # (..., H', W') meters, 0 where NONE
    fallback: torch.Tensor  # (..., H', W', D) mean distribution

    def counts(self) -> dict:
        return {s.name: int((self.source == s).sum()) for s in DepthSource}


def _select_k(score: torch.Tensor, k: int, largest: bool) -> torch.Tensor:
    """Mask of pixels whose score is at or beyond the k-th ranked value (ties included)."""
    sel = torch.zeros_like(score, dtype=torch.bool)
    if k <= 0 or score.numel() == 0:
        return sel
    ordered = torch.sort(score, descending=largest, stable=True).values
    thr = ordered[min(k, score.numel()) - 1]
    return score >= thr if largest else score <= thr


def compose_depth_aware(lidar_depth, lidar_mask, mu: torch.Tensor, uncertainty: torch.Tensor,
                        q: float, frustum: FrustumGrid,
                        gating: Gating | str = Gating.UNCERTAINTY) -> DepthAwareMap:
    """Fuse lidar depth with gated predictions for one view (H', W') or a stack (..., H', W').

    Lidar pixels (inside [d_min, d_max]) always win. Among the remaining P pixels of each
    view the ceil(q * P) most reliable become PRED with the argmax-bin depth; the rest
    are NONE and keep ``mu``.
    """
    gating = Gating(gating)
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    lidar_depth = torch.as_tensor(lidar_depth, dtype=mu.dtype)
    lidar_mask = torch.as_tensor(lidar_mask, dtype=torch.bool)
    lidar = lidar_mask & (lidar_depth >= frustum.d_min) & (lidar_depth <= frustum.d_max)
    centers = torch.as_tensor(frustum.bin_centers, dtype=mu.dtype)
    pred_depth = centers[mu.argmax(-1)]
    conf = mu.max(-1).values

    lead = lidar.shape[:-2]
    flat_lidar = lidar.reshape(-1, *lidar.shape[-2:])
    flat_u = uncertainty.reshape(flat_lidar.shape)
    flat_c = conf.reshape(flat_lidar.shape)
    pred = torch.zeros_like(flat_lidar)
    for v in range(flat_lidar.shape[0]):
        free = ~flat_lidar[v]
        P = int(free.sum())
        if P == 0 or gating is Gating.LIDAR_ONLY:
            continue
        if gating is Gating.ALL_PRED:
            pred[v] = free
            continue
        k = math.ceil(q * P - 1e-9)
        if gating is Gating.UNCERTAINTY:
            score, largest = flat_u[v][free], False
        else:
            score, largest = flat_c[v][free], True
        chosen = _select_k(score, k, largest)
        pv = torch.zeros_like(free)
        pv[free] = chosen
        pred[v] = pv
    pred = pred.reshape(*lead, *lidar.shape[-2:])

    source = torch.full(lidar.shape, int(DepthSource.NONE), dtype=torch.int8)
    source[pred] = int(DepthSource.PRED)
    source[lidar] = int(DepthSource.LIDAR)
    depth = torch.zeros_like(lidar_depth)
    depth = torch.where(pred, pred_depth, depth)
    depth = torch.where(lidar, lidar_depth, depth)
    return DepthAwareMap(source=source, depth=depth, fallback=mu)


def depth_aware_distribution(dmap: DepthAwareMap, frustum: FrustumGrid, mode: str = "onehot") -> torch.Tensor:
    """Lift distribution from a depth-aware map.

    LIDAR/PRED pixels get a one-hot at their depth's nearest bin ("onehot") or an even
    mix of that one-hot with the fallback ("blend"); NONE pixels keep the fallback.
    """
    D = frustum.num_bins
    onehot = torch.nn.functional.one_hot(frustum.nearest_bin(dmap.depth), D).to(dmap.fallback.dtype)
    if mode == "blend":
        onehot = 0.5 * (onehot + dmap.fallback)
    elif mode != "onehot":
        raise ValueError(f"unknown relift mode {mode!r}")
    known = (dmap.source != int(DepthSource.NONE)).unsqueeze(-1)
    return torch.where(known, onehot, dmap.fallback)


@dataclass
class TeacherState:
    model: BEVDetector
    alpha: float = 0.99
    iteration: int = 0

    @classmethod
    def from_student(cls, student: BEVDetector, alpha: float = 0.99) -> "TeacherState":
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(teacher, alpha, 0)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}


@torch.no_grad()
def ema_update(teacher: TeacherState, student: BEVDetector, alpha: float | None = None) -> TeacherState:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S for every parameter; t += 1."""
    alpha = teacher.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    t_params = dict(teacher.model.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pt.shape)} vs {tuple(ps.shape)}")
    for name, pt in t_params.items():
        pt.mul_(alpha).add_(s_params[name].detach() * (1.0 - alpha))
    teacher.iteration += 1
    return teacher


_warned_no_lidar = False


@torch.no_grad()
def teacher_forward(teacher: TeacherState, images: torch.Tensor, index, frustum: FrustumGrid,
                    lidar_depth: torch.Tensor | None = None, lidar_mask: torch.Tensor | None = None,
                    m: int = 10, q: float = 0.7, gating: Gating | str = Gating.UNCERTAINTY,
                    depth_aware: bool = True, relift: str = "onehot",
                    generator: torch.Generator | None = None, score_threshold: float = 0.05,
                    max_k: int = 50, return_map: bool = False):
    """Teacher pass over a target batch (B, M, 3, H, W).

    With ``depth_aware`` the lift uses lidar + gated predictions; otherwise the teacher's
    deterministic depth. Returns (SpaceFeatures, per-sample detections[, DepthAwareMap]).
    """
    global _warned_no_lidar
    model = teacher.model
    feat = model.encode(images)
    dmap = None
    if depth_aware:
        mu, unc = mc_uncertainty(model, images, m, generator if generator is not None else seeded_generator(teacher.iteration), feat=feat)
        if lidar_mask is None or not bool(lidar_mask.any()):
            if not _warned_no_lidar:
                log.warning("target batch carries no lidar; depth-aware map uses predictions only")
                _warned_no_lidar = True
            lidar_mask = torch.zeros(unc.shape, dtype=torch.bool)
            lidar_depth = torch.zeros(unc.shape, dtype=mu.dtype)
        dmap = compose_depth_aware(lidar_depth, lidar_mask, mu, unc, q, frustum, gating)
        depth = depth_aware_distribution(dmap, frustum, relift)
    else:
        depth = model.depth_dist(feat, stochastic=False)
    spaces = model.forward_to_spaces(feat, depth, index)
    heat, reg = model.head(spaces.bev)
    dets = [decode_detections(heat[b], reg[b], model.config.voxels, score_threshold, max_k)
            for b in range(heat.shape[0])]
    if return_map:
        return spaces, dets, dmap
    return spaces, dets


def make_pseudo_labels(detections: list[Detection], threshold: float = 0.3) -> np.ndarray:
    """Detections with score >= threshold as a (K, 8) gt-style box array."""
    return detections_to_boxes([d for d in detections if d.score >= threshold])
