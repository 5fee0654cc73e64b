"""Camera-only BEV detector: image encoder, dropout depth head, LSS view transform,
BEV encoder and center-heatmap head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..geometry import (FrustumGrid, FrustumIndex, SpaceFeatures, VoxelGridSpec,
                        build_frustum_index)

NUM_REG = 6  # dx, dy, z, log l, log w, yaw


@dataclass
class NetConfig:
    c_img: int = 64
    c_depth: int = 64
    c_bev: int = 64
    dropout: float = 0.3
    num_classes: int = 1
    frustum: FrustumGrid = field(default_factory=FrustumGrid)
    voxels: VoxelGridSpec = field(default_factory=VoxelGridSpec)

    def __post_init__(self):
        if not 0.0 < self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in (0, 1), got {self.dropout}")
        if isinstance(self.frustum, dict):
            self.frustum = FrustumGrid(**self.frustum)
        if isinstance(self.voxels, dict):
            v = dict(self.voxels)
            v.pop("counts", None)
            self.voxels = VoxelGridSpec(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["voxels"].pop("counts", None)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator (reproducible MC passes)."""
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class BEVDetector(nn.Module):
    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config = config or NetConfig()
        c, D = config.c_img, config.frustum.num_bins
        if config.frustum.stride != 4:
            raise ValueError("image encoder is fixed at stride 4")
        self.encoder = nn.Sequential(
            _conv(3, 32, stride=2), nn.ReLU(),
            _conv(32, 32), nn.ReLU(),
            _conv(32, c, stride=2), nn.ReLU(),
            _conv(c, c),
        )
        self.depth_trunk = nn.Sequential(
            _conv(c, config.c_depth), nn.ReLU(),
            _conv(config.c_depth, config.c_depth), nn.ReLU(),
        )
        self.depth_out = nn.Conv2d(config.c_depth, D, 1)
        Z = config.voxels.counts[2]
        self.bev_encoder = nn.Sequential(
            _conv(Z * c, config.c_bev), nn.ReLU(),
            _conv(config.c_bev, config.c_bev), nn.ReLU(),
        )
        self.heatmap_head = nn.Conv2d(config.c_bev, config.num_classes, 1)
        self.reg_head = nn.Conv2d(config.c_bev, NUM_REG, 1)
        nn.init.constant_(self.heatmap_head.bias, -2.19)
        self._frustum_cache: dict[bytes, FrustumIndex] = {}

    # -- image side -----------------------------------------------------------------

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """images (B, M, 3, H, W) in [0, 1] -> features (B, M, C, H/4, W/4)."""
        B, M = images.shape[:2]
        x = self.encoder(images.flatten(0, 1) - 0.5)
        return x.unflatten(0, (B, M))

    def depth_penultimate(self, feat: torch.Tensor) -> torch.Tensor:
        return self.depth_trunk(feat.flatten(0, 1)).unflatten(0, feat.shape[:2])

    def depth_from_penultimate(self, hidden: torch.Tensor, stochastic: bool = False,
                               generator: torch.Generator | None = None) -> torch.Tensor:
        """Dropout (if stochastic) + final 1x1 conv + softmax -> (B, M, H', W', D)."""
        x = hidden.flatten(0, 1)
        if stochastic:
            x = dropout(x, self.config.dropout, generator)
        logits = self.depth_out(x).unflatten(0, hidden.shape[:2])
        return logits.softmax(dim=2).permute(0, 1, 3, 4, 2)

    def depth_dist(self, feat: torch.Tensor, stochastic: bool = False,
                   generator: torch.Generator | None = None) -> torch.Tensor:
        return self.depth_from_penultimate(self.depth_penultimate(feat), stochastic, generator)

    # -- view transform ---------------------------------------------------------------

    def frustum_index(self, intrinsics, extrinsics, image_size) -> FrustumIndex:
        intrinsics = np.asarray(intrinsics, dtype=np.float64)
        extrinsics = np.asarray(extrinsics, dtype=np.float64)
        key = intrinsics.tobytes() + extrinsics.tobytes() + np.asarray(image_size).tobytes()
        idx = self._frustum_cache.get(key)
        if idx is None:
            idx = build_frustum_index(intrinsics, extrinsics, image_size,
                                      self.config.frustum, self.config.voxels)
            self._frustum_cache[key] = idx
        return idx

    def view_transform(self, feat: torch.Tensor, depth: torch.Tensor, index: FrustumIndex) -> torch.Tensor:
        """Lift + voxel pool for a batch sharing one rig.

        feat (B, M, C, H', W'), depth (B, M, H', W', D) -> voxel (B, X, Y, Z, C).
        """
        B, M, C, Hf, Wf = feat.shape
        D = depth.shape[-1]
        feat_flat = feat.permute(0, 1, 3, 4, 2).reshape(B, M * Hf * Wf, C)
        depth_flat = depth.reshape(B, M * Hf * Wf * D)
        p = index.point_index
        lifted = depth_flat[:, p].unsqueeze(-1) * feat_flat[:, torch.div(p, D, rounding_mode="floor")]
        grid = feat.new_zeros((B, self.config.voxels.num_cells, C))
        grid = grid.index_add(1, index.cell_index, lifted)
        X, Y, Z = self.config.voxels.counts
        return grid.reshape(B, X, Y, Z, C)

    def forward_to_spaces(self, feat: torch.Tensor, depth: torch.Tensor, index: FrustumIndex) -> SpaceFeatures:
        voxel = self.view_transform(feat, depth, index)
        B, X, Y, Z, C = voxel.shape
        bev_in = voxel.reshape(B, X, Y, Z * C).permute(0, 3, 1, 2)
        bev = self.bev_encoder(bev_in)
        return SpaceFeatures(image=feat, voxel=voxel.permute(0, 4, 1, 2, 3), bev=bev)

    def head(self, bev: torch.Tensor):
        """bev (B, C_b, X, Y) -> (heatmap probabilities (B, K, X, Y), regression (B, 6, X, Y))."""
        return torch.sigmoid(self.heatmap_head(bev)), self.reg_head(bev)

    def forward(self, images: torch.Tensor, index: FrustumIndex, stochastic: bool = False,
                generator: torch.Generator | None = None):
        """Full camera-only pass. Returns (spaces, depth, heatmap, regression)."""
        feat = self.encode(images)
        depth = self.depth_dist(feat, stochastic, generator)
        spaces = self.forward_to_spaces(feat, depth, index)
        heat, reg = self.head(spaces.bev)
        return spaces, depth, heat, reg


def seeded_generator(*seed_parts: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([int(s) for s in seed_parts]).generate_state(1)[0]))
    return g


def _images_tensor(sample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.images.transpose(0, 3, 1, 2)))


def predict_depth_dist(model: BEVDetector, images, stochastic: bool = False,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Per-pixel depth simplex (..., M, H', W', D) for images (B, M, 3, H, W) or a sample."""
    if not isinstance(images, torch.Tensor):
        images = _images_tensor(images).unsqueeze(0)
    return model.depth_dist(model.encode(images), stochastic, generator)


def forward_to_spaces(model: BEVDetector, sample, depth_dists: torch.Tensor) -> SpaceFeatures:
    """Encode one sample's views and lift with caller-supplied depth distributions
    (M, H', W', D) or (1, M, H', W', D)."""
    images = _images_tensor(sample).unsqueeze(0).to(next(model.parameters()).dtype)
    if depth_dists.dim() == 4:
        depth_dists = depth_dists.unsqueeze(0)
    with torch.no_grad():
        sums = depth_dists.sum(-1)
        if (sums - 1).abs().max() > 1e-5 or (depth_dists < 0).any():
            raise ValueError("depth distributions must be normalized")
    idx = model.frustum_index(sample.rig.intrinsics, sample.rig.extrinsics, sample.image_size)
    return model.forward_to_spaces(model.encode(images), depth_dists.to(images.dtype), idx)
