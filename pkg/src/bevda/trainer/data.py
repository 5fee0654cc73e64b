from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..geometry import FrustumGrid
from ..scenegen import CameraRig, MultiViewSample, downsample_depth, project_lidar_depth


@dataclass
class PreparedSample:
    """Tensors for one scene. Lidar fields are None for camera-only (evaluation) use."""

    images: torch.Tensor              # (M, 3, H, W)
    boxes: np.ndarray                 # (K, 8)
    rig: CameraRig
    image_size: tuple[int, int]
    lidar_depth: torch.Tensor | None  # (M, H', W')
    lidar_mask: torch.Tensor | None   # (M, H', W') bool

    @property
    def has_lidar(self) -> bool:
        return self.lidar_mask is not None and bool(self.lidar_mask.any())


def prepare(sample: MultiViewSample, frustum: FrustumGrid, with_lidar: bool = True) -> PreparedSample:
    images = torch.from_numpy(np.ascontiguousarray(sample.images.transpose(0, 3, 1, 2)))
    depth = mask = None
    if with_lidar:
        ds, ms = [], []
        for m in range(sample.num_views):
            ld = project_lidar_depth(sample, m)
            d, v = downsample_depth(ld.depth, ld.mask, frustum.stride)
            ds.append(d)
            ms.append(v)
        depth = torch.from_numpy(np.stack(ds)).float()
        mask = torch.from_numpy(np.stack(ms))
    return PreparedSample(images, np.asarray(sample.gt_boxes), sample.rig,
                          tuple(sample.image_size), depth, mask)


def prepare_all(samples: Sequence[MultiViewSample], frustum: FrustumGrid,
                with_lidar: bool = True) -> list[PreparedSample]:
    return [prepare(s, frustum, with_lidar) for s in samples]


@dataclass
class Batch:
    images: torch.Tensor
    boxes: list
    rig: CameraRig
    image_size: tuple[int, int]
    lidar_depth: torch.Tensor | None
    lidar_mask: torch.Tensor | None


def collate(items: Sequence[PreparedSample]) -> Batch:
    first = items[0]
    for it in items[1:]:
        if not (np.array_equal(it.rig.intrinsics, first.rig.intrinsics)
                and np.array_equal(it.rig.extrinsics, first.rig.extrinsics)):
            raise ValueError("all samples in a batch must share one camera rig")
    has_lidar = all(it.lidar_mask is not None for it in items)
    return Batch(
        images=torch.stack([it.images for it in items]),
        boxes=[it.boxes for it in items],
        rig=first.rig,
        image_size=first.image_size,
        lidar_depth=torch.stack([it.lidar_depth for it in items]) if has_lidar else None,
        lidar_mask=torch.stack([it.lidar_mask for it in items]) if has_lidar else None,
    )


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Deterministic shuffled batches for one epoch; the last partial batch is kept."""
    order = np.random.default_rng([seed, epoch, 104729]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
