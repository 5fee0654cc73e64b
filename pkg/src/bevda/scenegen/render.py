"""Synthetic flat-ground box worlds seen by a ring of pinhole cameras and a spinning lidar."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import ego_to_pixel, frustum_to_ego

CAMERA_HEIGHT = 1.6
LIDAR_HEIGHT = 1.8
MAX_RANGE = 60.0
PLACEMENT_RETRIES = 200


class ShiftKind(str, enum.Enum):
    NONE = "none"
    SCENE = "scene"
    WEATHER = "weather"
    DAYNIGHT = "daynight"


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_objects: int = 6
    layout_bounds: tuple[tuple[float, float], tuple[float, float]] = ((-16.0, 16.0), (-16.0, 16.0))
    object_size_ranges: dict = field(default_factory=lambda: {
        "car": ((3.6, 4.6), (1.6, 2.0), (1.4, 1.8)),
    })
    categories: tuple[str, ...] = ("car",)
    num_views: int = 4
    image_size: tuple[int, int] = (64, 96)
    lidar_rays: int = 4096
    hfov_deg: float = 100.0
    ego_clearance: float = 4.0

    def __post_init__(self):
        if self.num_objects < 0:
            raise ValueError("num_objects must be >= 0")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        H, W = self.image_size
        if H < 32 or W < 32:
            raise ValueError(f"image_size must be at least 32x32, got {self.image_size}")
        for cat in self.categories:
            if cat not in self.object_size_ranges:
                raise ValueError(f"no size range for category {cat!r}")
            for lo, hi in self.object_size_ranges[cat]:
                if not 0 < lo <= hi:
                    raise ValueError(f"bad size interval ({lo}, {hi}) for {cat!r}")
        if self.num_views * self.hfov_deg < 300.0:
            raise ValueError("camera ring must cover at least 300 degrees of azimuth")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_objects": self.num_objects,
            "layout_bounds": [list(b) for b in self.layout_bounds],
            "object_size_ranges": {k: [list(r) for r in v] for k, v in self.object_size_ranges.items()},
            "categories": list(self.categories),
            "num_views": self.num_views,
            "image_size": list(self.image_size),
            "lidar_rays": self.lidar_rays,
            "hfov_deg": self.hfov_deg,
            "ego_clearance": self.ego_clearance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["layout_bounds"] = tuple(tuple(b) for b in d["layout_bounds"])
        d["object_size_ranges"] = {k: tuple(tuple(r) for r in v) for k, v in d["object_size_ranges"].items()}
        d["categories"] = tuple(d["categories"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class DomainShiftConfig:
    kind: ShiftKind = ShiftKind.NONE
    gain: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    streak_density: float = 0.0
    palette_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        if self.gain <= 0 or self.gamma <= 0:
            raise ValueError("gain and gamma must be positive")
        if self.noise_sigma < 0 or self.streak_density < 0:
            raise ValueError("noise_sigma and streak_density must be nonnegative")
        if self.kind is ShiftKind.NONE and (self.gain, self.gamma, self.noise_sigma,
                                            self.streak_density, self.palette_id) != (1, 1, 0, 0, 0):
            raise ValueError("kind=NONE requires identity parameters")

    @classmethod
    def preset(cls, kind, **overrides) -> "DomainShiftConfig":
        kind = ShiftKind(kind)
        defaults = {
            ShiftKind.NONE: {},
            ShiftKind.WEATHER: {"noise_sigma": 0.25, "streak_density": 0.06},
            ShiftKind.DAYNIGHT: {"gain": 0.25, "gamma": 1.8},
            ShiftKind.SCENE: {"palette_id": 1},
        }[kind]
        return cls(kind=kind, **{**defaults, **overrides})

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "gain": self.gain, "gamma": self.gamma,
                "noise_sigma": self.noise_sigma, "streak_density": self.streak_density,
                "palette_id": self.palette_id}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainShiftConfig":
        return cls(**d)


@dataclass
class CameraRig:
    intrinsics: np.ndarray  # (M, 3, 3)
    extrinsics: np.ndarray  # (M, 4, 4) ego -> camera

    @property
    def num_views(self) -> int:
        return self.intrinsics.shape[0]


@dataclass
class MultiViewSample:
    images: np.ndarray        # (M, H, W, 3) float32 in [0, 1]
    lidar_points: np.ndarray  # (N, 3) float64, ego frame
    rig: CameraRig
    gt_boxes: np.ndarray      # (K, 8) float64: cx, cy, cz, l, w, h, yaw, category
    domain_tag: str = "SOURCE"

    @property
    def num_views(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1:3]


@dataclass
class LidarDepth:
    """Sparse per-pixel depth from projected lidar.

    ``uv`` carries the sub-pixel projection of the point that won each pixel and
    ``point_index`` its row in ``sample.lidar_points`` (-1 where unwritten).
    """

    depth: np.ndarray        # (H, W) meters, 0 where unwritten
    mask: np.ndarray         # (H, W) bool
    uv: np.ndarray           # (H, W, 2)
    point_index: np.ndarray  # (H, W) int64


def make_rig(spec: SceneSpec) -> CameraRig:
    H, W = spec.image_size
    f = (W / 2) / math.tan(math.radians(spec.hfov_deg) / 2)
    K = np.array([[f, 0.0, W / 2], [0.0, f, H / 2], [0.0, 0.0, 1.0]])
    Ks, Ts = [], []
    for m in range(spec.num_views):
        yaw = 2 * math.pi * m / spec.num_views
        c, s = math.cos(yaw), math.sin(yaw)
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        center = np.array([0.0, 0.0, CAMERA_HEIGHT])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ center
        Ks.append(K.copy())
        Ts.append(T)
    return CameraRig(np.stack(Ks), np.stack(Ts))


# Palettes: ground base, ground texture amplitude, sky top, sky horizon, object colors.
_PALETTES = [
    {
        "ground": (0.42, 0.42, 0.44), "ground_alt": (0.30, 0.31, 0.33), "texture": "checker",
        "sky_top": (0.45, 0.65, 0.95), "sky_horizon": (0.80, 0.88, 0.98),
        "objects": [(0.85, 0.15, 0.12), (0.15, 0.35, 0.85), (0.90, 0.85, 0.20),
                    (0.20, 0.70, 0.30), (0.92, 0.92, 0.92)],
    },
    {
        "ground": (0.62, 0.50, 0.34), "ground_alt": (0.52, 0.40, 0.26), "texture": "stripes",
        "sky_top": (0.75, 0.70, 0.60), "sky_horizon": (0.90, 0.85, 0.75),
        "objects": [(0.20, 0.20, 0.22), (0.55, 0.10, 0.55), (0.10, 0.55, 0.55),
                    (0.70, 0.45, 0.10), (0.35, 0.35, 0.10)],
    },
]
_LIGHT = np.array([0.4, 0.3, 0.866])


def _place_boxes(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    (x0, x1), (y0, y1) = spec.layout_bounds
    boxes, radii = [], []
    for _ in range(spec.num_objects):
        cat = int(rng.integers(len(spec.categories)))
        (l0, l1), (w0, w1), (h0, h1) = spec.object_size_ranges[spec.categories[cat]]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        r = 0.5 * math.hypot(l, w)
        for _attempt in range(PLACEMENT_RETRIES):
            cx = rng.uniform(x0 + r, x1 - r) if x1 - x0 > 2 * r else 0.5 * (x0 + x1)
            cy = rng.uniform(y0 + r, y1 - r) if y1 - y0 > 2 * r else 0.5 * (y0 + y1)
            if math.hypot(cx, cy) < spec.ego_clearance + r:
                continue
            if all(math.hypot(cx - b[0], cy - b[1]) > r + rb + 0.3 for b, rb in zip(boxes, radii)):
                break
        else:
            raise ValueError(
                f"could not place {spec.num_objects} objects without overlap "
                f"(over-dense layout, seed={spec.seed})")
        yaw = rng.uniform(-math.pi / 2, math.pi / 2)
        boxes.append((cx, cy, h / 2, l, w, h, yaw, cat))
        radii.append(r)
    return np.array(boxes, dtype=np.float64).reshape(-1, 8)


def _ray_cast(origins: np.ndarray, dirs: np.ndarray, boxes: np.ndarray):
    """Nearest-hit ray cast against the ground plane z=0 and oriented boxes.

    Returns (t, hit_id, normal): hit_id -1 for ground, -2 for no hit, else box index.
    """
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    hit = np.full(n, -2, dtype=np.int64)
    normal = np.zeros((n, 3))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < -1e-9, -origins[:, 2] / dirs[:, 2], np.inf)
    sel = t_ground < t_best
    t_best[sel] = t_ground[sel]
    hit[sel] = -1
    normal[sel] = (0.0, 0.0, 1.0)

    for k, (cx, cy, cz, l, w, h, yaw, _cat) in enumerate(boxes):
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # ego -> box
        o = (origins - np.array([cx, cy, cz])) @ rot.T
        d = dirs @ rot.T
        half = np.array([l / 2, w / 2, h / 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        axis = tmin.argmax(axis=1)
        ok = (t_near <= t_far) & (t_near > 1e-6) & (t_near < t_best)
        if not ok.any():
            continue
        t_best[ok] = t_near[ok]
        hit[ok] = k
        sign = -np.sign(d[ok, axis[ok]])
        local_n = np.zeros((ok.sum(), 3))
        local_n[np.arange(ok.sum()), axis[ok]] = sign
        normal[ok] = local_n @ rot  # box -> ego
    far = t_best > MAX_RANGE
    hit[far] = -2
    t_best[far] = np.inf
    return t_best, hit, normal


def _shade(points, hit, normal, dirs, boxes, colors, palette, rng_tex_phase):
    n = hit.shape[0]
    rgb = np.zeros((n, 3))
    sky = hit == -2
    elev = np.clip(dirs[:, 2], 0.0, 1.0)[:, None]
    rgb[sky] = (np.array(palette["sky_horizon"]) * (1 - elev[sky])
                + np.array(palette["sky_top"]) * elev[sky])
    ground = hit == -1
    if ground.any():
        gx, gy = points[ground, 0], points[ground, 1]
        if palette["texture"] == "checker":
            pat = ((np.floor(gx / 2.0 + rng_tex_phase) + np.floor(gy / 2.0)) % 2).astype(np.float64)
        else:
            pat = (np.floor((gx + gy) / 1.5 + rng_tex_phase) % 2).astype(np.float64)
        base = np.array(palette["ground"])
        alt = np.array(palette["ground_alt"])
        rgb[ground] = base * (1 - pat[:, None]) + alt * pat[:, None]
    obj = hit >= 0
    if obj.any():
        col = colors[hit[obj]]
        lam = np.clip(normal[obj] @ _LIGHT, 0.0, 1.0)[:, None]
        rgb[obj] = col * (0.35 + 0.65 * lam)
    return rgb


def _render_views(rig: CameraRig, image_size, boxes, colors, palette, tex_phase):
    H, W = image_size
    vv, uu = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    images = []
    for m in range(rig.num_views):
        T = rig.extrinsics[m]
        far = frustum_to_ego(uu, vv, np.ones_like(uu), rig.intrinsics[m], T).reshape(-1, 3)
        center = -T[:3, :3].T @ T[:3, 3]
        dirs = far - center
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(center, dirs.shape)
        t, hit, normal = _ray_cast(origins, dirs, boxes)
        pts = origins + dirs * np.where(np.isfinite(t), t, 0.0)[:, None]
        rgb = _shade(pts, hit, normal, dirs, boxes, colors, palette, tex_phase)
        images.append(rgb.reshape(H, W, 3))
    return np.stack(images)


def _lidar_scan(num_rays: int, boxes: np.ndarray, n_elev: int = 16) -> np.ndarray:
    n_az = max(num_rays // n_elev, 1)
    az = 2 * math.pi * (np.arange(n_az) + 0.5) / n_az
    el = np.radians(np.linspace(-24.0, 2.0, n_elev))
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origins = np.broadcast_to(np.array([0.0, 0.0, LIDAR_HEIGHT]), dirs.shape)
    t, hit, _ = _ray_cast(origins, dirs, boxes)
    keep = hit != -2
    return origins[keep] + dirs[keep] * t[keep, None]


def _photometric(images: np.ndarray, shift: DomainShiftConfig, rng: np.random.Generator) -> np.ndarray:
    out = images
    if shift.gamma != 1.0 or shift.gain != 1.0:
        out = shift.gain * np.power(out, shift.gamma)
    if shift.streak_density > 0:
        out = out.copy()
        M, H, W, _ = out.shape
        length = 6
        n = int(round(shift.streak_density * H * W / length))
        for m in range(M):
            r = rng.integers(0, H, size=n)
            c = rng.integers(0, W, size=n)
            for k in range(length):
                rr = np.clip(r + k, 0, H - 1)
                cc = np.clip(c + k // 3, 0, W - 1)
                out[m, rr, cc, :] = 0.5 * out[m, rr, cc, :] + 0.45
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


_SHIFT_CODES = {ShiftKind.NONE: 0, ShiftKind.SCENE: 1, ShiftKind.WEATHER: 2, ShiftKind.DAYNIGHT: 3}


def generate_sample(spec: SceneSpec, shift: DomainShiftConfig | None = None,
                    domain_tag: str | None = None) -> MultiViewSample:
    """Render one deterministic scene. Geometry depends only on ``spec``; ``shift`` only
    changes appearance, so boxes and lidar are shared between domains for a given seed."""
    shift = shift or DomainShiftConfig()
    layout_rng = np.random.default_rng(spec.seed)
    boxes = _place_boxes(spec, layout_rng)
    color_idx = layout_rng.integers(0, 5, size=len(boxes))
    tex_phase = float(layout_rng.uniform(0.0, 1.0))

    palette = _PALETTES[shift.palette_id % len(_PALETTES)]
    colors = np.array(palette["objects"])[color_idx] if len(boxes) else np.zeros((0, 3))
    rig = make_rig(spec)
    images = _render_views(rig, spec.image_size, boxes, colors, palette, tex_phase)
    shift_rng = np.random.default_rng([spec.seed, _SHIFT_CODES[shift.kind], shift.palette_id, 7919])
    images = _photometric(images, shift, shift_rng).astype(np.float32)
    lidar = _lidar_scan(spec.lidar_rays, boxes)
    if domain_tag is None:
        domain_tag = "SOURCE" if shift.kind is ShiftKind.NONE else "TARGET"
    return MultiViewSample(images=images, lidar_points=lidar, rig=rig, gt_boxes=boxes,
                           domain_tag=domain_tag)


def generate_dataset(spec: SceneSpec, shift: DomainShiftConfig, n: int, seed: int,
                     domain_tag: str | None = None) -> list[MultiViewSample]:
    """``n`` scenes with per-scene seeds derived from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [generate_sample(replace(spec, seed=int(s)), shift, domain_tag) for s in seeds]


def project_lidar_depth(sample: MultiViewSample, view: int) -> LidarDepth:
    """Project lidar into ``view``; per pixel keep the nearest camera-frame depth."""
    M = sample.num_views
    if not 0 <= view < M:
        raise IndexError(f"view {view} out of range for {M} views")
    H, W = sample.image_size
    depth = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=bool)
    uv = np.full((H, W, 2), np.nan)
    index = np.full((H, W), -1, dtype=np.int64)
    pts = sample.lidar_points
    if len(pts) == 0:
        return LidarDepth(depth, mask, uv, index)
    u, v, z = ego_to_pixel(pts, sample.rig.intrinsics[view], sample.rig.extrinsics[view])
    ok = (z > 0) & np.isfinite(u) & np.isfinite(v)
    ok &= (u >= 0) & (u < W) & (v >= 0) & (v < H)
    ids = np.nonzero(ok)[0]
    if len(ids) == 0:
        return LidarDepth(depth, mask, uv, index)
    cols = np.floor(u[ids]).astype(np.int64)
    rows = np.floor(v[ids]).astype(np.int64)
    # Nearest point per pixel; equal depths resolved by lower point index.
    pix = rows * W + cols
    order = np.lexsort((ids, z[ids], pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    sel = order[first]
    ids, rows, cols = ids[sel], rows[sel], cols[sel]
    depth[rows, cols] = z[ids]
    mask[rows, cols] = True
    uv[rows, cols, 0] = u[ids]
    uv[rows, cols, 1] = v[ids]
    index[rows, cols] = ids
    return LidarDepth(depth, mask, uv, index)


def downsample_depth(depth: np.ndarray, mask: np.ndarray, stride: int):
    """Min-pool a sparse depth map to feature resolution. Returns (depth, mask)."""
    H, W = depth.shape
    Hf, Wf = H // stride, W // stride
    d = np.where(mask, depth, np.inf)[: Hf * stride, : Wf * stride]
    d = d.reshape(Hf, stride, Wf, stride).min(axis=(1, 3))
    valid = np.isfinite(d)
    return np.where(valid, d, 0.0), valid
