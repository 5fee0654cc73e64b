"""Center-distance mAP over a dataset."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..perception.decode import Detection, decode_detections

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
RECALL_POINTS = 41


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the interpolated precision-recall curve.

    ``tp`` flags detections sorted by descending score. The 41-point recall grid
    {0, 1/40, ..., 1} is integrated with right-endpoint rectangles, so each of the 40
    intervals contributes the best precision achievable at recall >= its right end.
    """
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope: best precision at any recall >= current
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, RECALL_POINTS)[1:]
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def match_detections(detections: Sequence[Sequence[Detection]], gt_boxes: Sequence[np.ndarray],
                     threshold: float, category: int | None = None):
    """Greedy matching by BEV center distance, highest score first.

    Returns (tp flags in score order, number of gt boxes).
    """
    flat = []
    for s, dets in enumerate(detections):
        for d in dets:
            if category is None or d.category == category:
                flat.append((-d.score, s, d))
    flat.sort(key=lambda x: (x[0], x[1]))
    gts = []
    for g in gt_boxes:
        g = np.asarray(g, dtype=np.float64).reshape(-1, 8)
        if category is not None:
            g = g[g[:, 7] == category]
        gts.append(g)
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(flat), dtype=bool)
    for n, (_, s, d) in enumerate(flat):
        g = gts[s]
        if len(g) == 0:
            continue
        dist = np.hypot(g[:, 0] - d.center[0], g[:, 1] - d.center[1])
        dist[taken[s]] = np.inf
        if category is None:
            dist[g[:, 7] != d.category] = np.inf
        best = int(np.argmin(dist))
        if dist[best] < threshold:
            taken[s][best] = True
            tp[n] = True
    return tp, sum(len(g) for g in gts)


@dataclass
class EvalReport:
    ap: dict
    mAP: float
    num_samples: int
    num_gt: int
    num_detections: int
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def metrics_dict(self) -> dict:
        """Everything except timing, for bitwise reproducibility checks."""
        d = self.to_dict()
        d.pop("runtime_s")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = ["threshold (m) | AP", "------------- | ------"]
        lines += [f"{t:>13} | {self.ap[t]:.4f}" for t in self.ap]
        lines.append(f"{'mAP':>13} | {self.mAP:.4f}")
        lines.append(f"samples={self.num_samples} gt={self.num_gt} dets={self.num_detections} "
                     f"runtime={self.runtime_s:.1f}s")
        return "\n".join(lines)


def compute_report(detections, gt_boxes, num_classes: int = 1,
                   thresholds=THRESHOLDS) -> EvalReport:
    aps = {}
    for t in thresholds:
        per_cat = []
        for k in range(num_classes):
            tp, n = match_detections(detections, gt_boxes, t, category=k)
            per_cat.append(average_precision(tp, n))
        aps[str(float(t))] = float(np.mean(per_cat))
    num_gt = sum(len(np.asarray(g).reshape(-1, 8)) for g in gt_boxes)
    return EvalReport(ap=aps, mAP=float(np.mean(list(aps.values()))), num_samples=len(gt_boxes),
                      num_gt=num_gt, num_detections=sum(len(d) for d in detections))


@torch.no_grad()
def predict_dataset(model, prepared, batch_size: int = 8, score_threshold: float = 0.05,
                    max_k: int = 50) -> list[list[Detection]]:
    """Camera-only deterministic inference (no lidar is read)."""
    out = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start:start + batch_size]
        images = torch.stack([p.images for p in chunk])
        index = model.frustum_index(chunk[0].rig.intrinsics, chunk[0].rig.extrinsics, chunk[0].image_size)
        _, _, heat, reg = model(images, index, stochastic=False)
        for b in range(len(chunk)):
            out.append(decode_detections(heat[b], reg[b], model.config.voxels, score_threshold, max_k))
    return out


def evaluate_model(model, prepared, batch_size: int = 8, score_threshold: float = 0.05,
                   max_k: int = 50) -> EvalReport:
    if len(prepared) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    dets = predict_dataset(model, prepared, batch_size, score_threshold, max_k)
    report = compute_report(dets, [p.boxes for p in prepared], model.config.num_classes)
    report.runtime_s = time.perf_counter() - t0
    return report
