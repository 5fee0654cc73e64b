"""Toggle grids over the adaptation components, run across seeds."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..scenegen import DomainShiftConfig, SceneSpec, generate_dataset
from .config import Toggles, TrainConfig
from .data import prepare_all
from .loops import adapt_uda, evaluate, pretrain_source

log = logging.getLogger(__name__)

_DAT = dict(da=True, ema=True, kt=True, pl=True, bev=True, voxel=True, image=True)
_NO_GAS = dict(ba=False, ia=False, va=False)
_NO_DAT = {k: False for k in _DAT}


@dataclass(frozen=True)
class Arm:
    """One grid cell. ``adapt=False`` evaluates the source checkpoint as is."""

    name: str
    toggles: Toggles = field(default_factory=Toggles)
    overrides: tuple = ()
    adapt: bool = True

    def key(self) -> str:
        return json.dumps([self.adapt, sorted(vars(self.toggles).items()), sorted(self.overrides)])


SOURCE_ONLY = Arm("source-only", Toggles.all_off(), adapt=False)
CONTROL = Arm("all-off", Toggles.all_off())
FULL = Arm("full", Toggles())
DAT_ONLY = Arm("dat-only", Toggles(**_NO_GAS))
GAS_ONLY = Arm("gas-only", Toggles(**_NO_DAT))

GRIDS: dict[str, list[Arm]] = {
    # component stacking: teacher family, alignment family, both
    "components": [
        SOURCE_ONLY,
        Arm("da+kt", Toggles(**{**_NO_GAS, "ema": False})),
        DAT_ONLY,
        Arm("ba", Toggles(**_NO_DAT, ba=True, ia=False, va=False)),
        Arm("ba+ia", Toggles(**_NO_DAT, ba=True, ia=True, va=False)),
        GAS_ONLY,
        FULL,
        CONTROL,
    ],
    # which non-lidar pixels keep their predicted depth in the teacher
    "gating": [
        Arm("lidar", Toggles(**_NO_GAS), (("gating", "lidar"),)),
        Arm("pred", Toggles(**_NO_GAS), (("gating", "pred"),)),
        Arm("confidence", Toggles(**_NO_GAS), (("gating", "confidence"),)),
        DAT_ONLY,
    ],
    # which teacher outputs the student imitates
    "transfer": [
        Arm("pl", Toggles(**_NO_GAS, **{"bev": False, "voxel": False, "image": False})),
        Arm("pl+bev", Toggles(**_NO_GAS, **{"voxel": False, "image": False})),
        Arm("pl+bev+voxel", Toggles(**_NO_GAS, image=False)),
        DAT_ONLY,
    ],
}


def grid_arms(names) -> list[Arm]:
    arms, seen = [], set()
    for n in names:
        if n not in GRIDS:
            raise KeyError(f"unknown grid {n!r}; choose from {sorted(GRIDS)}")
        for a in GRIDS[n]:
            if a.key() not in seen:
                seen.add(a.key())
                arms.append(a)
    return arms


def desk_datasets(seed: int, scenario: str = "weather", n_train: int = 200, n_eval: int = 50,
                  spec: SceneSpec | None = None):
    """Source/target train sets plus source/target eval sets, all derived from ``seed``."""
    spec = spec or SceneSpec()
    shift = DomainShiftConfig.preset(scenario)
    clean = DomainShiftConfig()
    return {
        "source": generate_dataset(spec, clean, n_train, 1000 + seed),
        "target": generate_dataset(spec, shift, n_train, 2000 + seed),
        "eval_source": generate_dataset(spec, clean, n_eval, 3000 + seed),
        "eval_target": generate_dataset(spec, shift, n_eval, 4000 + seed),
    }


@dataclass
class AblationResult:
    arms: list[str]
    seeds: list[int]
    target_map: dict          # arm -> [per-seed target mAP]
    source_map: dict          # "source-only" -> [per-seed source mAP]
    reports: dict = field(default_factory=dict)

    def mean(self, arm: str) -> float:
        return float(np.mean(self.target_map[arm]))

    def to_dict(self) -> dict:
        return {"arms": self.arms, "seeds": self.seeds, "target_map": self.target_map,
                "source_map": self.source_map, "reports": self.reports}

    def table(self) -> str:
        head = "| arm | " + " | ".join(f"seed {s}" for s in self.seeds) + " | mean |"
        lines = [head, "|" + "---|" * (len(self.seeds) + 2)]
        for a in self.arms:
            vals = self.target_map[a]
            lines.append(f"| {a} | " + " | ".join(f"{v:.4f}" for v in vals) + f" | {np.mean(vals):.4f} |")
        if self.source_map:
            vals = self.source_map["source-only"]
            lines.append("| source-only (source eval) | " + " | ".join(f"{v:.4f}" for v in vals)
                         + f" | {np.mean(vals):.4f} |")
        return "\n".join(lines)


def run_ablation(base: TrainConfig, arms: list[Arm], seeds, scenario: str = "weather",
                 n_train: int = 200, n_eval: int = 50, out_dir=None, spec: SceneSpec | None = None) -> AblationResult:
    """Pretrain once per seed, then adapt and evaluate each arm on the target eval set.

    Arms that share toggles and overrides are run once. With ``out_dir`` every seed's
    checkpoints, metrics and reports are written under ``out_dir/seed_<s>/``.
    """
    out = Path(out_dir) if out_dir is not None else None
    seeds = list(seeds)
    arms = list({a.name: a for a in arms}.values())
    target_map = {a.name: [] for a in arms}
    source_map = {"source-only": []}
    reports: dict = {a.name: [] for a in arms}
    for seed in seeds:
        cfg = replace(base, seed=seed)
        data = desk_datasets(seed, scenario, n_train, n_eval, spec)
        frustum = cfg.net.frustum
        src = prepare_all(data["source"], frustum, with_lidar=True)
        tgt = prepare_all(data["target"], frustum, with_lidar=True)
        sd = out / f"seed_{seed}" if out is not None else None
        pre = pretrain_source(cfg, src, metrics_path=sd / "pretrain.csv" if sd else None).checkpoint
        if sd is not None:
            pre.save(sd / "pretrain.pt")
        rs = evaluate(pre, data["eval_source"])
        source_map["source-only"].append(rs.mAP)
        done: dict[str, float] = {}
        for arm in arms:
            if arm.key() in done:
                m, rep = done[arm.key()]
            else:
                if arm.adapt:
                    acfg = replace(cfg, toggles=arm.toggles).override(**dict(arm.overrides))
                    ad = sd / arm.name if sd else None
                    ck = adapt_uda(acfg, src, tgt, pre, metrics_path=ad / "metrics.csv" if ad else None).checkpoint
                    if ad is not None:
                        ck.save(ad / "checkpoint.pt")
                else:
                    ck = pre
                r = evaluate(ck, data["eval_target"])
                m, rep = r.mAP, r.metrics_dict()
                done[arm.key()] = (m, rep)
                log.info("seed %d %-14s target mAP %.4f", seed, arm.name, m)
            target_map[arm.name].append(m)
            reports[arm.name].append(rep)
    res = AblationResult([a.name for a in arms], seeds, target_map, source_map, reports)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True))
        (out / "table.md").write_text(res.table() + "\n")
    return res
