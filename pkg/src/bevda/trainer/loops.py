"""Source pretraining, teacher-student adaptation and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..dat import (DepthSource, Gating, TeacherState, compose_depth_aware, depth_aware_distribution,
                   ema_update, make_pseudo_labels, teacher_forward)
from ..gas import AlignmentParams, domain_prototypes, loss_gas
from ..objective import loss_mkt, loss_total
from ..perception.checkpoint import Checkpoint, CheckpointError, load_params, state_of
from ..perception.losses import loss_depth, loss_detection
from ..perception.model import BEVDetector, seeded_generator
from ..scenegen import MultiViewSample
from .config import TrainConfig
from .data import Batch, PreparedSample, collate, epoch_batches, prepare_all
from .evaluate import EvalReport, evaluate_model

log = logging.getLogger(__name__)

# stream ids mixed into generator seeds so every random draw has its own sequence
_PRETRAIN, _SOURCE, _TARGET, _TEACHER, _INIT = 1, 2, 3, 4, 5

METRIC_COLUMNS = ("phase", "epoch", "iteration", "l_total", "l_det", "l_depth", "l_sup",
                  "l_uns", "l_mkt", "l_gas", "n_pseudo", "lr", "wall_s")


class TrainingDiverged(RuntimeError):
    def __init__(self, phase: str, iteration: int, last_finite: int, detail: str):
        super().__init__(f"{phase}: non-finite loss at iteration {iteration} ({detail}); "
                         f"last finite iteration {last_finite}")
        self.iteration = iteration
        self.last_finite = last_finite


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


class MetricsLog:
    """Append-only CSV; the header is written once when the file is new."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self._t0 = time.perf_counter()

    def write(self, **row) -> dict:
        row = {k: row.get(k, "") for k in METRIC_COLUMNS} | {"wall_s": round(time.perf_counter() - self._t0, 3)}
        self.rows.append(row)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            with self.path.open("a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
                if new:
                    w.writeheader()
                w.writerow(row)
        return row


def _prepared(data, frustum, with_lidar: bool) -> list[PreparedSample]:
    data = list(data)
    if data and isinstance(data[0], MultiViewSample):
        return prepare_all(data, frustum, with_lidar)
    return data


def _index(model: BEVDetector, batch: Batch):
    return model.frustum_index(batch.rig.intrinsics, batch.rig.extrinsics, batch.image_size)


def _float(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def lidar_lift(depth: torch.Tensor, lidar_depth: torch.Tensor, lidar_mask: torch.Tensor, frustum) -> torch.Tensor:
    """Replace the lift distribution at lidar pixels by a one-hot at the lidar bin,
    the same relifting the teacher applies, so the BEV stack is trained on both."""
    dmap = compose_depth_aware(lidar_depth, lidar_mask, depth.detach(), depth.new_zeros(depth.shape[:-1]),
                               0.0, frustum, Gating.LIDAR_ONLY)
    onehot = depth_aware_distribution(dmap, frustum, "onehot")
    known = (dmap.source == int(DepthSource.LIDAR)).unsqueeze(-1)
    return torch.where(known, onehot, depth)


def supervised_terms(model: BEVDetector, batch: Batch, config: TrainConfig, generator,
                     relift: bool = False):
    """Labelled detection + lidar depth terms on one batch. Terms whose weight is zero
    are not computed. With ``relift`` the lift uses lidar one-hots where lidar exists;
    depth supervision always sees the predicted distribution. Returns (det, depth, spaces)."""
    net = model.config
    index = _index(model, batch)
    feat = model.encode(batch.images)
    depth = model.depth_dist(feat, stochastic=True, generator=generator)
    lift_dist = depth
    if relift and batch.lidar_mask is not None:
        lift_dist = lidar_lift(depth, batch.lidar_depth, batch.lidar_mask, net.frustum)
    spaces = model.forward_to_spaces(feat, lift_dist, index)
    heat, reg = model.head(spaces.bev)
    det = dep = None
    if config.weights.supervised > 0:
        det = loss_detection(heat, reg, batch.boxes, net.voxels)
    if config.depth_weight > 0 and batch.lidar_mask is not None:
        dep = loss_depth(depth, batch.lidar_depth, batch.lidar_mask, net.frustum)
    return det, dep, spaces


def _relift_draw(config: TrainConfig, stream: int, it: int) -> bool:
    if config.lidar_lift_prob <= 0:
        return False
    return bool(np.random.default_rng([config.seed, stream, it, 31]).random() < config.lidar_lift_prob)


def _check_finite(phase, it, last_finite, **terms):
    for name, v in terms.items():
        if v is not None and not math.isfinite(_float(v)):
            raise TrainingDiverged(phase, it, last_finite, f"{name}={_float(v)}")


def pretrain_source(config: TrainConfig, source, resume: Checkpoint | None = None,
                    metrics_path=None, max_steps: int | None = None) -> TrainResult:
    """Train on labelled source scenes with detection + depth supervision.

    ``resume`` continues a pretrain checkpoint from its stored iteration; ``max_steps``
    stops early (total iterations, counted from zero) so a run can be split in two.
    """
    net = config.net
    data = _prepared(source, net.frustum, with_lidar=True)
    if not data:
        raise ValueError("source dataset is empty")
    torch.manual_seed(config.seed)
    model = BEVDetector(net)
    opt = torch.optim.AdamW(model.parameters(), lr=config.pretrain_lr, weight_decay=config.weight_decay)
    start = 0
    if resume is not None:
        if resume.phase != "pretrain":
            raise CheckpointError(f"cannot resume pretraining from a {resume.phase!r} checkpoint")
        if resume.config_hash != net.digest():
            raise CheckpointError("checkpoint network config differs from the training config")
        load_params(model, resume.student)
        if resume.optimizer is not None:
            opt.load_state_dict(resume.optimizer)
        start = resume.iteration
    metrics = MetricsLog(metrics_path)
    per_epoch = math.ceil(len(data) / config.batch_size)
    total_steps = per_epoch * config.pretrain_epochs
    stop = total_steps if max_steps is None else min(max_steps, total_steps)
    last_finite = start - 1
    it = start
    while it < stop:
        epoch, pos = divmod(it, per_epoch)
        ids = epoch_batches(len(data), config.batch_size, config.seed, epoch)[pos]
        batch = collate([data[i] for i in ids])
        det, dep, _ = supervised_terms(model, batch, config, seeded_generator(config.seed, _PRETRAIN, it),
                                       _relift_draw(config, _PRETRAIN, it))
        _check_finite("pretrain", it, last_finite, l_det=det, l_depth=dep)
        total = None
        if det is not None:
            total = config.weights.supervised * det
        if dep is not None:
            total = config.depth_weight * dep if total is None else total + config.depth_weight * dep
        if total is not None:
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
        last_finite = it
        metrics.write(phase="pretrain", epoch=epoch, iteration=it,
                      l_total=_float(total) if total is not None else 0.0,
                      l_det=_float(det) if det is not None else "",
                      l_depth=_float(dep) if dep is not None else "", lr=config.pretrain_lr)
        it += 1
    epoch_done = it // per_epoch
    ckpt = Checkpoint(net_config=net, student=state_of(model), phase="pretrain", iteration=it,
                      epoch=epoch_done, train_config=config.to_dict(), optimizer=opt.state_dict())
    return TrainResult(ckpt, metrics.rows)


def _alignment_channels(net) -> dict:
    return {"image": net.c_img, "voxel": net.c_img, "bev": net.c_bev}


def adapt_uda(config: TrainConfig, source, target, checkpoint: Checkpoint,
              metrics_path=None, hooks=None) -> TrainResult:
    """Teacher-student adaptation on paired source/target batches.

    Per iteration: teacher pass on the target batch with depth-aware lifting, pseudo
    labels, source supervision, student target pass with feature imitation, prototype
    alignment through the reversal layer, one optimizer step on the weighted total, then
    the EMA update. Every disabled term is skipped, including the forward passes that
    only it needs. ``hooks`` is an optional dict of callables used by tests to observe
    or perturb intermediate values (keys: ``teacher_spaces``).
    """
    hooks = hooks or {}
    net = config.net
    if checkpoint.config_hash != net.digest():
        raise CheckpointError(f"checkpoint config {checkpoint.config_hash} is incompatible with "
                              f"training config {net.digest()}")
    tg = config.toggles
    w = config.weights
    src = _prepared(source, net.frustum, with_lidar=True)
    tgt = _prepared(target, net.frustum, with_lidar=tg.da and tg.needs_teacher)
    if not src or not tgt:
        raise ValueError("source and target datasets must be non-empty")

    student = checkpoint.build_student()
    teacher = None
    if tg.needs_teacher:
        teacher = TeacherState.from_student(student, config.alpha)
    align_spaces = tg.alignment_spaces if w.alignment > 0 else ()
    params = list(student.parameters())
    align = None
    if align_spaces:
        torch.manual_seed(int(np.random.SeedSequence([config.seed, _INIT]).generate_state(1)[0]))
        align = AlignmentParams(_alignment_channels(net), net.num_classes)
        params += list(align.parameters())
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    transfer = tg.transfer_spaces if w.transfer > 0 else ()
    use_pl = tg.pseudo_labels and w.unsupervised > 0
    need_target_student = use_pl or bool(transfer) or bool(align_spaces)
    need_teacher = teacher is not None and (use_pl or bool(transfer))
    metrics = MetricsLog(metrics_path)

    it = 0
    last_finite = -1
    for epoch in range(config.adapt_epochs):
        s_batches = epoch_batches(len(src), config.batch_size, config.seed, epoch)
        t_batches = epoch_batches(len(tgt), config.batch_size, config.seed + 7777, epoch)
        for s_ids, t_ids in zip(s_batches, t_batches):
            sb = collate([src[i] for i in s_ids])
            tb = collate([tgt[i] for i in t_ids]) if need_target_student else None

            # 1-2. teacher on target, pseudo labels
            t_spaces = pseudo = None
            n_pseudo = ""
            if need_teacher:
                t_spaces, t_dets = teacher_forward(
                    teacher, tb.images, _index(teacher.model, tb), net.frustum,
                    tb.lidar_depth, tb.lidar_mask, m=config.mc_passes, q=config.quantile,
                    gating=config.gating, depth_aware=tg.da, relift=config.relift,
                    generator=seeded_generator(config.seed, _TEACHER, it),
                    score_threshold=config.score_threshold, max_k=config.max_k)
                if "teacher_spaces" in hooks:
                    t_spaces = hooks["teacher_spaces"](t_spaces)
                if use_pl:
                    pseudo = [make_pseudo_labels(d, config.pl_threshold) for d in t_dets]
                    n_pseudo = sum(len(p) for p in pseudo)

            # 3. source supervision
            det, dep, s_spaces = supervised_terms(student, sb, config, seeded_generator(config.seed, _SOURCE, it),
                                                  _relift_draw(config, _SOURCE, it))
            l_sup = None
            if det is not None:
                l_sup = det
            if dep is not None:
                l_sup = config.depth_weight * dep if l_sup is None else l_sup + config.depth_weight * dep

            # 4. student on target
            l_uns = l_mkt = l_gas = None
            if need_target_student:
                st_spaces, _, heat_t, reg_t = student(tb.images, _index(student, tb), stochastic=True,
                                                      generator=seeded_generator(config.seed, _TARGET, it))
                if use_pl:
                    l_uns = loss_detection(heat_t, reg_t, pseudo, net.voxels)
                if transfer:
                    l_mkt = loss_mkt(t_spaces, st_spaces, transfer)
                # 5. prototype alignment
                if align_spaces:
                    f_s = domain_prototypes(s_spaces, align, align_spaces, config.reverse_weight)
                    f_t = domain_prototypes(st_spaces, align, align_spaces, config.reverse_weight)
                    l_gas = loss_gas(f_s, f_t, align)

            _check_finite("adapt", it, last_finite, l_sup=l_sup, l_uns=l_uns, l_mkt=l_mkt, l_gas=l_gas)
            # 6. weighted total; the alignment slot minimizes the discriminator's
            # cross-entropy, -l_gas, and the reversal layer turns that into confusion upstream
            zero = torch.zeros(())
            total = loss_total(l_uns if l_uns is not None else zero,
                               l_sup if l_sup is not None else zero,
                               l_mkt if l_mkt is not None else zero,
                               -l_gas if l_gas is not None else zero, w)
            if total.requires_grad:
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
            # 7. EMA
            if teacher is not None and tg.ema:
                ema_update(teacher, student)
            last_finite = it
            metrics.write(phase="adapt", epoch=epoch, iteration=it, l_total=_float(total),
                          l_det=_float(det) if det is not None else "",
                          l_depth=_float(dep) if dep is not None else "",
                          l_sup=_float(l_sup) if l_sup is not None else "",
                          l_uns=_float(l_uns) if l_uns is not None else "",
                          l_mkt=_float(l_mkt) if l_mkt is not None else "",
                          l_gas=_float(l_gas) if l_gas is not None else "",
                          n_pseudo=n_pseudo, lr=config.lr)
            it += 1

    ckpt = Checkpoint(net_config=net, student=state_of(student), phase="adapt", iteration=it,
                      epoch=config.adapt_epochs, train_config=config.to_dict(),
                      teacher=state_of(teacher.model) if teacher is not None else None,
                      teacher_iteration=teacher.iteration if teacher is not None else 0,
                      align=state_of(align) if align is not None else None,
                      optimizer=opt.state_dict())
    return TrainResult(ckpt, metrics.rows)


def evaluate(checkpoint: Checkpoint, dataset, batch_size: int = 8, score_threshold: float = 0.05,
             max_k: int = 50) -> EvalReport:
    """Camera-only evaluation of the student. Lidar in ``dataset`` is never touched."""
    model = checkpoint.build_student()
    model.eval()
    data = list(dataset)
    if data and isinstance(data[0], MultiViewSample):
        data = prepare_all(data, model.config.frustum, with_lidar=False)
    else:
        data = [PreparedSample(d.images, d.boxes, d.rig, d.image_size, None, None) for d in data]
    return evaluate_model(model, data, batch_size, score_threshold, max_k)
