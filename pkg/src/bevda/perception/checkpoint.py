"""Checkpoint container.

A checkpoint is a ``torch.save`` dict::

    format          "bevda-checkpoint"
    version         1
    net_config      NetConfig.to_dict()
    config_hash     NetConfig.digest()
    train_config    dict of the training hyper-parameters (informational)
    phase           "pretrain" | "adapt"
    iteration       optimizer steps taken in this phase
    epoch           epochs completed in this phase
    student         {name: tensor}
    shapes          {name: [dims]} for every student tensor
    teacher         {name: tensor} | None
    teacher_iteration
    align           {name: tensor} | None
    optimizer       optimizer state dict | None
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .model import BEVDetector, NetConfig

FORMAT = "bevda-checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    net_config: NetConfig
    student: dict
    phase: str = "pretrain"
    iteration: int = 0
    epoch: int = 0
    train_config: dict = field(default_factory=dict)
    teacher: dict | None = None
    teacher_iteration: int = 0
    align: dict | None = None
    optimizer: dict | None = None

    @property
    def config_hash(self) -> str:
        return self.net_config.digest()

    def build_student(self) -> BEVDetector:
        model = BEVDetector(self.net_config)
        load_params(model, self.student)
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": FORMAT,
            "version": VERSION,
            "net_config": self.net_config.to_dict(),
            "config_hash": self.config_hash,
            "train_config": self.train_config,
            "phase": self.phase,
            "iteration": self.iteration,
            "epoch": self.epoch,
            "student": self.student,
            "shapes": {k: list(v.shape) for k, v in self.student.items()},
            "teacher": self.teacher,
            "teacher_iteration": self.teacher_iteration,
            "align": self.align,
            "optimizer": self.optimizer,
        }, path)
        return path

    @classmethod
    def load(cls, path, expect: NetConfig | None = None) -> "Checkpoint":
        raw = torch.load(Path(path), map_location="cpu", weights_only=False)
        if raw.get("format") != FORMAT or raw.get("version") != VERSION:
            raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} file")
        net = NetConfig(**raw["net_config"])
        if net.digest() != raw["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch")
        for name, shape in raw["shapes"].items():
            if list(raw["student"][name].shape) != shape:
                raise CheckpointError(f"{path}: tensor {name} has shape "
                                      f"{list(raw['student'][name].shape)}, header says {shape}")
        if expect is not None and expect.digest() != net.digest():
            raise CheckpointError(f"{path}: checkpoint config {net.digest()} incompatible with "
                                  f"requested {expect.digest()}")
        return cls(net_config=net, student=raw["student"], phase=raw["phase"],
                   iteration=raw["iteration"], epoch=raw["epoch"], train_config=raw["train_config"],
                   teacher=raw["teacher"], teacher_iteration=raw["teacher_iteration"],
                   align=raw["align"], optimizer=raw["optimizer"])


def state_of(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def load_params(module: torch.nn.Module, params: dict) -> None:
    """Strict load that reports every shape mismatch."""
    own = module.state_dict()
    missing = own.keys() - params.keys()
    extra = params.keys() - own.keys()
    bad = [f"{k}: {tuple(params[k].shape)} != {tuple(own[k].shape)}"
           for k in own.keys() & params.keys() if params[k].shape != own[k].shape]
    if missing or extra or bad:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} "
                              f"unexpected={sorted(extra)} shapes={bad}")
    module.load_state_dict(params)
