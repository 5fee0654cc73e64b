"""Detection and depth supervision losses."""
from __future__ import annotations

import math

import numpy as np
import torch

from ..geometry import FrustumGrid, VoxelGridSpec

EPS = 1e-12


def gaussian_radius(length: float, width: float, min_overlap: float = 0.1) -> float:
    """CenterNet radius such that a box shifted by it keeps ``min_overlap`` IoU."""
    h, w = length, width
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def render_targets(gt_boxes, voxels: VoxelGridSpec, num_classes: int = 1):
    """Rasterize boxes into a Gaussian heatmap and regression targets on the BEV grid.

    Returns (heatmap (K, X, Y), reg (6, X, Y), cells (P, 2) int, mask (X, Y) bool).
    Boxes whose center falls outside the BEV range are skipped.
    """
    X, Y, _ = voxels.counts
    heat = np.zeros((num_classes, X, Y))
    reg = np.zeros((6, X, Y))
    cells = []
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 8)
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    for cx, cy, cz, l, w, h, yaw, cat in boxes:
        fx = (cx - voxels.x_range[0]) / voxels.dx
        fy = (cy - voxels.y_range[0]) / voxels.dy
        i, j = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= i < X and 0 <= j < Y):
            continue
        radius = max(1, int(gaussian_radius(l / voxels.dx, w / voxels.dy)))
        sigma = (2 * radius + 1) / 6.0
        g = np.exp(-((ii - i) ** 2 + (jj - j) ** 2) / (2 * sigma ** 2))
        g[np.maximum(np.abs(ii - i), np.abs(jj - j)) > radius] = 0.0
        k = int(cat)
        heat[k] = np.maximum(heat[k], g)
        reg[:, i, j] = (fx - i - 0.5, fy - j - 0.5, cz, math.log(l), math.log(w), yaw)
        cells.append((i, j))
    mask = np.zeros((X, Y), dtype=bool)
    cells = np.array(cells, dtype=np.int64).reshape(-1, 2)
    mask[cells[:, 0], cells[:, 1]] = True
    return heat, reg, cells, mask


def focal_heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced focal loss, normalized by the number of peaks (at least 1).

    Peaks (target == 1) use -(1-p)^2 log p. Elsewhere the penalty is
    -(1-t)^4 (p-t)^2 log(1-|p-t|), which reduces to the usual -p^2 log(1-p) on
    background and vanishes when the prediction reproduces the Gaussian skirt.
    """
    pos = target == 1
    pos_loss = -((1 - pred) ** 2) * torch.log(pred.clamp_min(EPS))
    diff = pred - target
    neg_loss = -((1 - target) ** 4) * diff ** 2 * torch.log((1 - diff.abs()).clamp_min(EPS))
    loss = torch.where(pos, pos_loss, neg_loss).sum()
    return loss / max(int(pos.sum()), 1)


def loss_detection(heatmap: torch.Tensor, regression: torch.Tensor, gt_boxes,
                   voxels: VoxelGridSpec, reg_weight: float = 0.25) -> torch.Tensor:
    """Focal heatmap loss + L1 regression at gt cells.

    heatmap (K, X, Y) probabilities and regression (6, X, Y), or batched (B, ...) with
    ``gt_boxes`` a list of per-sample box arrays; the batch loss is the mean.
    """
    if heatmap.dim() == 4:
        losses = [loss_detection(h, r, g, voxels, reg_weight) for h, r, g in zip(heatmap, regression, gt_boxes)]
        return torch.stack(losses).mean()
    heat_t, reg_t, cells, _ = render_targets(gt_boxes, voxels, heatmap.shape[0])
    heat_t = torch.as_tensor(heat_t, dtype=heatmap.dtype)
    loss = focal_heatmap_loss(heatmap, heat_t)
    if len(cells):
        reg_t = torch.as_tensor(reg_t, dtype=regression.dtype)
        i, j = torch.from_numpy(cells[:, 0]), torch.from_numpy(cells[:, 1])
        l1 = (regression[:, i, j] - reg_t[:, i, j]).abs().sum()
        loss = loss + reg_weight * l1 / len(cells)
    return loss


def loss_depth(depth_dist: torch.Tensor, depth: torch.Tensor, mask: torch.Tensor,
               frustum: FrustumGrid) -> torch.Tensor:
    """Cross-entropy of the predicted bin distribution against the lidar depth bin.

    depth_dist (..., D); depth, mask (...). Pixels whose lidar depth lies outside
    [d_min, d_max] are skipped; no valid pixel gives 0.
    """
    depth = torch.as_tensor(depth, dtype=depth_dist.dtype)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    valid = mask & (depth >= frustum.d_min) & (depth <= frustum.d_max)
    if not valid.any():
        return depth_dist.sum() * 0.0
    bins = frustum.nearest_bin(depth[valid])
    p = depth_dist[valid].gather(-1, bins.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p.clamp_min(EPS)).mean()
