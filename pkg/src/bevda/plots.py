"""Figure emission: loss curves, per-scenario bars, prototype scatter."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .gas import AlignmentParams, domain_prototypes  # noqa: E402
from .perception.checkpoint import Checkpoint, CheckpointError, load_params  # noqa: E402
from .trainer.data import collate, prepare_all  # noqa: E402

LOSS_TERMS = ("l_total", "l_det", "l_depth", "l_sup", "l_uns", "l_mkt", "l_gas")


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def plot_loss_curves(metric_files: dict, out) -> Path:
    """One panel per loss term, one line per run (label -> metrics CSV)."""
    runs = {label: read_metrics(p) for label, p in metric_files.items()}
    terms = [t for t in LOSS_TERMS if any(r.get(t) not in ("", None) for rows in runs.values() for r in rows)]
    if not terms:
        raise ValueError("no loss values found in the given metrics files")
    fig, axes = plt.subplots(1, len(terms), figsize=(3.2 * len(terms), 3), squeeze=False)
    for ax, term in zip(axes[0], terms):
        for label, rows in runs.items():
            pts = [(int(r["iteration"]), float(r[term])) for r in rows if r.get(term) not in ("", None)]
            if pts:
                x, y = zip(*pts)
                ax.plot(x, y, label=label, lw=1)
        ax.set_title(term)
        ax.set_xlabel("iteration")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_scenario_bars(scores: dict, out) -> Path:
    """scores: {model label: {scenario: mAP}}."""
    labels = list(scores)
    scenarios = sorted({s for v in scores.values() for s in v})
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(scenarios), 3))
    x = np.arange(len(scenarios))
    for i, lab in enumerate(labels):
        ax.bar(x + i * width, [scores[lab].get(s, 0.0) for s in scenarios], width, label=lab)
    ax.set_xticks(x + width * (len(labels) - 1) / 2, scenarios)
    ax.set_ylabel("mAP")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


@torch.no_grad()
def prototypes_of(checkpoint: Checkpoint, samples, batch_size: int = 8) -> np.ndarray:
    """(N, 256 * n) prototypes of ``samples`` under the checkpoint's alignment head."""
    if checkpoint.align is None:
        raise CheckpointError("checkpoint has no alignment parameters (was GAS enabled?)")
    net = checkpoint.net_config
    model = checkpoint.build_student().eval()
    align = AlignmentParams({"image": net.c_img, "voxel": net.c_img, "bev": net.c_bev}, net.num_classes)
    load_params(align, checkpoint.align)
    enabled = tuple(k for k, t in (("bev", "ba"), ("image", "ia"), ("voxel", "va"))
                    if checkpoint.train_config.get("toggles", {}).get(t, True))
    prepared = prepare_all(list(samples), net.frustum, with_lidar=False)
    out = []
    for i in range(0, len(prepared), batch_size):
        b = collate(prepared[i:i + batch_size])
        idx = model.frustum_index(b.rig.intrinsics, b.rig.extrinsics, b.image_size)
        spaces, *_ = model(b.images, idx)
        out.append(domain_prototypes(spaces, align, enabled).flatten(1).numpy())
    return np.concatenate(out, 0)


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


def plot_prototypes(src: np.ndarray, tgt: np.ndarray, out, title: str = "") -> Path:
    z = pca_2d(np.concatenate([src, tgt], 0))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(z[:len(src), 0], z[:len(src), 1], s=10, label="source")
    ax.scatter(z[len(src):, 0], z[len(src):, 1], s=10, marker="x", label="target")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
