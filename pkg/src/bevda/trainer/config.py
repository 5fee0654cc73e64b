"""Training configuration: JSON file + ``key=value`` overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..objective import LossWeights
from ..perception.model import NetConfig

TOGGLE_NAMES = ("da", "ema", "kt", "ba", "ia", "va", "pl", "bev", "voxel", "image")


@dataclass
class Toggles:
    """Ablation switches. DAT family: da, ema, kt (with pl/bev/voxel/image as its transfer
    channels). GAS family: ba, ia, va (spaces feeding the shared embedding)."""

    da: bool = True
    ema: bool = True
    kt: bool = True
    ba: bool = True
    ia: bool = True
    va: bool = True
    pl: bool = True
    bev: bool = True
    voxel: bool = True
    image: bool = True

    @classmethod
    def all_off(cls) -> "Toggles":
        return cls(**{k: False for k in TOGGLE_NAMES})

    @classmethod
    def only(cls, *names: str) -> "Toggles":
        unknown = set(names) - set(TOGGLE_NAMES)
        if unknown:
            raise ValueError(f"unknown toggles {sorted(unknown)}")
        return cls(**{k: k in names for k in TOGGLE_NAMES})

    @property
    def transfer_spaces(self) -> tuple[str, ...]:
        if not self.kt:
            return ()
        return tuple(s for s in ("image", "voxel", "bev") if getattr(self, s))

    @property
    def pseudo_labels(self) -> bool:
        return self.kt and self.pl

    @property
    def alignment_spaces(self) -> tuple[str, ...]:
        return tuple(s for s, t in (("bev", "ba"), ("image", "ia"), ("voxel", "va")) if getattr(self, t))

    @property
    def needs_teacher(self) -> bool:
        return self.pseudo_labels or bool(self.transfer_spaces)

    def label(self) -> str:
        on = [k for k in TOGGLE_NAMES if getattr(self, k)]
        return "+".join(on) if on else "none"


@dataclass
class TrainConfig:
    lr: float = 2e-4              # adaptation
    pretrain_lr: float = 1e-3
    weight_decay: float = 0.0
    pretrain_epochs: int = 8
    adapt_epochs: int = 4
    batch_size: int = 4
    seed: int = 0
    alpha: float = 0.99
    mc_passes: int = 10
    quantile: float = 0.7
    gating: str = "uncertainty"
    relift: str = "onehot"
    score_threshold: float = 0.05
    pl_threshold: float = 0.3
    max_k: int = 50
    depth_weight: float = 1.0
    lidar_lift_prob: float = 0.5
    reverse_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: Toggles = field(default_factory=Toggles)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.toggles, dict):
            self.toggles = Toggles(**self.toggles)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.pretrain_epochs < 1 or self.adapt_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if not 0.0 <= self.lidar_lift_prob <= 1.0:
            raise ValueError("lidar_lift_prob must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def override(self, **changes) -> "TrainConfig":
        """Dotted keys address nested fields, e.g. ``weights.transfer=0.2``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *path, leaf = key.split(".")
            for p in path:
                node = node[p]
            if leaf not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[leaf] = value
        return TrainConfig(**d)


def parse_override(text: str):
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
