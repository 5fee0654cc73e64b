from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import VoxelGridSpec


@dataclass
class Detection:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    category: int
    score: float

    def as_box(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw, self.category], dtype=np.float64)


def decode_detections(heatmap, regression, voxels: VoxelGridSpec, score_threshold: float = 0.1,
                      max_k: int = 50) -> list[Detection]:
    """Peaks of a (K, X, Y) heatmap that are local 3x3 maxima above the threshold.

    Box height is not regressed: objects rest on the ground, so h = 2 * z.
    """
    heat = torch.as_tensor(heatmap).detach().double()
    reg = torch.as_tensor(regression).detach().double()
    pooled = F.max_pool2d(heat.unsqueeze(0), 3, stride=1, padding=1).squeeze(0)
    peaks = (heat == pooled) & (heat > score_threshold)
    k, i, j = torch.nonzero(peaks, as_tuple=True)
    scores = heat[k, i, j]
    order = torch.argsort(-scores, stable=True)[:max_k]
    dets = []
    for n in order.tolist():
        kk, ii, jj = int(k[n]), int(i[n]), int(j[n])
        dx, dy, z, log_l, log_w, yaw = reg[:, ii, jj].tolist()
        x = voxels.x_range[0] + (ii + 0.5 + dx) * voxels.dx
        y = voxels.y_range[0] + (jj + 0.5 + dy) * voxels.dy
        l, w = math.exp(min(log_l, 5.0)), math.exp(min(log_w, 5.0))
        h = 2.0 * max(z, 0.05)
        dets.append(Detection((x, y, z), (l, w, h), yaw, kk, float(scores[n])))
    return dets


def detections_to_boxes(dets: list[Detection]) -> np.ndarray:
    return np.array([d.as_box() for d in dets], dtype=np.float64).reshape(-1, 8)
