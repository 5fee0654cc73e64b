"""LSS geometric substrate: lift, frustum-to-ego projection, voxel pooling, BEV collapse.

Conventions
-----------
Ego frame: x forward, y left, z up (meters).
Camera frame: x right, y down, z forward; depth is the camera z coordinate.
Extrinsics are 4x4 rigid transforms ego -> camera.
Pixel (row i, col j) covers u in [j, j+1), v in [i, i+1); its center is (j+0.5, i+0.5).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class FrustumGrid:
    """Uniform depth binning of the camera frustum."""

    num_bins: int = 32
    d_min: float = 1.0
    d_max: float = 40.0
    stride: int = 4

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.num_bins < 1 or self.stride < 1:
            raise ValueError("num_bins and stride must be >= 1")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.num_bins

    @property
    def bin_centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.num_bins) + 0.5) * self.bin_width

    def nearest_bin(self, depth):
        """Index of the bin whose center is nearest to ``depth`` (array or tensor)."""
        if isinstance(depth, torch.Tensor):
            idx = torch.floor((depth - self.d_min) / self.bin_width).long()
            return idx.clamp(0, self.num_bins - 1)
        idx = np.floor((np.asarray(depth) - self.d_min) / self.bin_width).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)


@dataclass(frozen=True)
class VoxelGridSpec:
    x_range: tuple[float, float] = (-20.0, 20.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    z_range: tuple[float, float] = (0.0, 3.0)
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.5
    counts: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("cell sizes must be positive")
        counts = tuple(
            int(round((hi - lo) / d))
            for (lo, hi), d in zip((self.x_range, self.y_range, self.z_range), (self.dx, self.dy, self.dz))
        )
        if min(counts) < 1:
            raise ValueError(f"voxel grid must have at least one cell per axis, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def cell(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def num_cells(self) -> int:
        X, Y, Z = self.counts
        return X * Y * Z

    def cell_index(self, points) -> np.ndarray:
        """Flat cell index (x-major, then y, then z) per point, -1 outside the grid.

        Cells are half-open intervals (lo, hi], so a point on a shared boundary belongs
        to the lower-index cell; the grid's lower faces are therefore outside.
        """
        points = np.asarray(points, dtype=np.float64)
        ijk = np.ceil((points - self.lower) / self.cell).astype(np.int64) - 1
        X, Y, Z = self.counts
        inside = np.all((ijk >= 0) & (ijk < np.array([X, Y, Z])), axis=-1)
        flat = (ijk[..., 0] * Y + ijk[..., 1]) * Z + ijk[..., 2]
        return np.where(inside, flat, -1)

    def bev_cell_center(self, i, j):
        """Ego (x, y) of the center of BEV cell (i, j)."""
        return (self.x_range[0] + (np.asarray(i) + 0.5) * self.dx,
                self.y_range[0] + (np.asarray(j) + 0.5) * self.dy)


@dataclass
class SpaceFeatures:
    """Features of the three geometric spaces from one forward pass.

    Layouts are channel-first with a leading batch dim:
    image (B, M, C_img, H', W'), voxel (B, C_v, X, Y, Z), bev (B, C_b, X, Y).
    """

    image: torch.Tensor
    voxel: torch.Tensor
    bev: torch.Tensor

    def detach(self) -> "SpaceFeatures":
        return SpaceFeatures(self.image.detach(), self.voxel.detach(), self.bev.detach())


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def lift(image_feat, depth_dist, atol: float = 1e-5) -> torch.Tensor:
    """Outer product of per-pixel features with per-pixel depth distributions.

    image_feat: (..., C), depth_dist: (..., D) -> (..., D, C).
    """
    image_feat = _as_tensor(image_feat)
    depth_dist = _as_tensor(depth_dist, image_feat.dtype)
    with torch.no_grad():
        sums = depth_dist.sum(-1)
        if (depth_dist < 0).any() or (sums - 1).abs().max() > atol:
            raise ValueError(f"depth distribution not normalized within {atol}")
    return depth_dist.unsqueeze(-1) * image_feat.unsqueeze(-2)


def frustum_to_ego(u, v, depth, intrinsics, extrinsics):
    """Back-project pixel coordinates at camera depth ``depth`` into the ego frame.

    u, v, depth broadcast together; returns (..., 3). Works on numpy arrays or tensors
    (tensors keep autograd).
    """
    if isinstance(depth, torch.Tensor) or isinstance(u, torch.Tensor):
        u, v, depth = (_as_tensor(a) for a in (u, v, depth))
        K = _as_tensor(intrinsics, u.dtype)
        T = _as_tensor(extrinsics, u.dtype)
        x = (u - K[0, 2]) / K[0, 0] * depth
        y = (v - K[1, 2]) / K[1, 1] * depth
        cam = torch.stack(torch.broadcast_tensors(x, y, depth), dim=-1)
        R, t = T[:3, :3], T[:3, 3]
        return (cam - t) @ R
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    K = np.asarray(intrinsics, dtype=np.float64)
    T = np.asarray(extrinsics, dtype=np.float64)
    cam = np.stack([(u - K[0, 2]) / K[0, 0] * depth, (v - K[1, 2]) / K[1, 1] * depth, depth], axis=-1)
    return (cam - T[:3, 3]) @ T[:3, :3]


def ego_to_pixel(points, intrinsics, extrinsics):
    """Forward pinhole projection. Returns (u, v, depth) arrays; depth <= 0 means behind."""
    points = np.asarray(points, dtype=np.float64)
    K = np.asarray(intrinsics, dtype=np.float64)
    T = np.asarray(extrinsics, dtype=np.float64)
    cam = points @ T[:3, :3].T + T[:3, 3]
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * cam[..., 0] / z + K[0, 2]
        v = K[1, 1] * cam[..., 1] / z + K[1, 2]
    return u, v, z


def pool_indexed(flat_index: torch.Tensor, features: torch.Tensor, num_cells: int) -> torch.Tensor:
    """Sum-pool ``features`` (P, C) into ``num_cells`` rows by precomputed valid indices."""
    out = features.new_zeros((num_cells, features.shape[-1]))
    return out.index_add(0, flat_index, features)


def voxel_pool(points, features, spec: VoxelGridSpec) -> torch.Tensor:
    """Sum-pool point features into the voxel grid; points outside the grid are dropped.

    points: (P, 3) ego meters, features: (P, C) -> (X, Y, Z, C).
    """
    features = _as_tensor(features)
    if not torch.isfinite(features).all():
        raise ValueError("features must be finite")
    pts = points.detach().cpu().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
    idx = spec.cell_index(pts.reshape(-1, 3))
    keep = np.nonzero(idx >= 0)[0]
    feats = features.reshape(-1, features.shape[-1])[torch.from_numpy(keep)]
    grid = pool_indexed(torch.from_numpy(idx[keep]), feats, spec.num_cells)
    X, Y, Z = spec.counts
    return grid.reshape(X, Y, Z, -1)


def bev_collapse(voxel: torch.Tensor) -> torch.Tensor:
    """(..., X, Y, Z, C) -> (..., X, Y, Z*C); channel z*C + c holds slice z, channel c."""
    *lead, X, Y, Z, C = voxel.shape
    return voxel.reshape(*lead, X, Y, Z * C)


def bev_uncollapse(bev: torch.Tensor, Z: int) -> torch.Tensor:
    *lead, X, Y, ZC = bev.shape
    return bev.reshape(*lead, X, Y, Z, ZC // Z)


@dataclass
class FrustumIndex:
    """Precomputed frustum-cell -> voxel-cell mapping for one camera rig.

    ``point_index`` addresses the flattened (M, H', W', D) frustum; ``cell_index`` holds the
    matching flat voxel cell. Only frustum points that fall inside the grid are kept.
    """

    point_index: torch.Tensor
    cell_index: torch.Tensor
    feat_shape: tuple[int, int]
    num_views: int
    num_bins: int


def feature_pixel_centers(image_size: Sequence[int], stride: int):
    """Image-plane (u, v) of feature-cell centers for a stride-``stride`` feature map."""
    H, W = image_size
    Hf, Wf = H // stride, W // stride
    v = (np.arange(Hf) + 0.5) * stride
    u = (np.arange(Wf) + 0.5) * stride
    return np.meshgrid(u, v)  # each (Hf, Wf)


def build_frustum_index(intrinsics, extrinsics, image_size, frustum: FrustumGrid,
                        voxels: VoxelGridSpec) -> FrustumIndex:
    intrinsics = np.asarray(intrinsics)
    extrinsics = np.asarray(extrinsics)
    M = intrinsics.shape[0]
    uu, vv = feature_pixel_centers(image_size, frustum.stride)
    d = frustum.bin_centers
    cells = []
    for m in range(M):
        pts = frustum_to_ego(uu[..., None], vv[..., None], d, intrinsics[m], extrinsics[m])
        cells.append(voxels.cell_index(pts))  # (Hf, Wf, D)
    cells = np.stack(cells).reshape(-1)
    keep = np.nonzero(cells >= 0)[0]
    return FrustumIndex(
        point_index=torch.from_numpy(keep),
        cell_index=torch.from_numpy(cells[keep]),
        feat_shape=uu.shape,
        num_views=M,
        num_bins=len(d),
    )
