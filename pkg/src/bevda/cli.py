"""Command-line entry point: ``bevda <command> [flags]``.

Commands: gen-data, pretrain, adapt, eval, ablate, plot. Exit codes are 0 on success,
2 on usage errors and 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from pathlib import Path

COMMANDS = ("gen-data", "pretrain", "adapt", "eval", "ablate", "plot")
SCENARIOS = ("scene", "weather", "daynight")
NO_TOGGLES = ("da", "ema", "kt", "ba", "ia", "va", "pl")

log = logging.getLogger("bevda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, help="JSON training config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, dotted keys allowed (repeatable)")


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="bevda", description=__doc__.splitlines()[0])
    sub = root.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    _common(p)
    p.add_argument("--scenario", choices=SCENARIOS, default="weather")
    p.add_argument("--split", choices=("src", "tgt"), default="src",
                   help="src renders the clean domain, tgt applies the scenario shift")
    p.add_argument("--n", type=int, default=200)

    p = sub.add_parser("pretrain", help="supervised training on a source dataset")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="pretrain checkpoint to continue from")

    p = sub.add_parser("adapt", help="unsupervised adaptation from a source checkpoint")
    _common(p)
    _train_flags(p)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    for t in NO_TOGGLES:
        p.add_argument(f"--no-{t}", action="store_true", help=f"disable the {t} component")

    p = sub.add_parser("eval", help="camera-only evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("ablate", help="run toggle grids over several seeds")
    _common(p)
    _train_flags(p)
    p.add_argument("--scenario", choices=SCENARIOS, default="weather")
    p.add_argument("--grid", action="append", choices=("components", "gating", "transfer", "all"),
                   help="grid(s) to run (default: all)")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-eval", type=int, default=50)

    p = sub.add_parser("plot", help="emit figures from runs and checkpoints")
    _common(p)
    p.add_argument("--metrics", action="append", default=[], metavar="[LABEL=]CSV",
                   help="metrics CSV for the loss-curve figure (repeatable)")
    p.add_argument("--checkpoint", action="append", default=[], metavar="[LABEL=]PATH",
                   help="checkpoint for the per-scenario bars (repeatable)")
    p.add_argument("--scenario", action="append", choices=SCENARIOS,
                   help="scenarios for the bars (default: all)")
    p.add_argument("--n", type=int, default=20, help="scenes per scenario for the bars")
    p.add_argument("--adapted", type=Path, help="adapted checkpoint for the prototype scatter")
    p.add_argument("--source", type=Path)
    p.add_argument("--target", type=Path)
    return root


def _labelled(items):
    out = {}
    for it in items:
        label, _, path = it.rpartition("=")
        path = Path(path)
        out[label or path.parent.name or path.stem] = path
    return out


def _config(args, phase: str | None = None):
    from .trainer import TrainConfig, parse_override

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = dict(parse_override(o) for o in args.overrides)
    changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        if phase in ("pretrain", None):
            changes["pretrain_epochs"] = args.epochs
        if phase in ("adapt", None):
            changes["adapt_epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        changes["pretrain_lr" if phase == "pretrain" else "lr"] = args.lr
    for t in NO_TOGGLES:
        if getattr(args, f"no_{t}", False):
            changes[f"toggles.{t}"] = False
    try:
        return cfg.override(**changes)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None


def cmd_gen_data(args):
    from .scenegen import DomainShiftConfig, SceneSpec, generate_dataset, write_dataset

    spec = SceneSpec()
    shift = DomainShiftConfig.preset(args.scenario) if args.split == "tgt" else DomainShiftConfig()
    samples = generate_dataset(spec, shift, args.n, args.seed)
    write_dataset(args.out, samples, spec, shift, split=args.split)
    print(f"wrote {len(samples)} scenes to {args.out}")


def cmd_pretrain(args):
    from .perception import Checkpoint
    from .scenegen import read_dataset
    from .trainer import pretrain_source

    cfg = _config(args, "pretrain")
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    resume = Checkpoint.load(args.resume, expect=cfg.net) if args.resume else None
    metrics = args.out / "metrics.csv"
    if resume is None:
        metrics.unlink(missing_ok=True)
    res = pretrain_source(cfg, read_dataset(args.data), resume=resume, metrics_path=metrics)
    res.checkpoint.save(args.out / "checkpoint.pt")
    print(f"pretrained {res.checkpoint.iteration} steps -> {args.out / 'checkpoint.pt'}")


def cmd_adapt(args):
    from .perception import Checkpoint
    from .scenegen import read_dataset
    from .trainer import adapt_uda

    cfg = _config(args, "adapt")
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    pre = Checkpoint.load(args.checkpoint, expect=cfg.net)
    metrics = args.out / "metrics.csv"
    metrics.unlink(missing_ok=True)
    res = adapt_uda(cfg, read_dataset(args.source), read_dataset(args.target), pre, metrics_path=metrics)
    res.checkpoint.save(args.out / "checkpoint.pt")
    print(f"adapted {res.checkpoint.iteration} steps ({cfg.toggles.label()}) -> {args.out / 'checkpoint.pt'}")


def cmd_eval(args):
    from .perception import Checkpoint
    from .scenegen import read_dataset
    from .trainer import evaluate

    cfg = _config(args)
    ck = Checkpoint.load(args.checkpoint)
    report = evaluate(ck, read_dataset(args.data), score_threshold=cfg.score_threshold, max_k=cfg.max_k)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json())
    (args.out / "report.txt").write_text(report.table() + "\n")
    print(report.table())


def cmd_ablate(args):
    from .trainer.ablation import GRIDS, grid_arms, run_ablation

    cfg = _config(args)
    grids = args.grid or ["all"]
    names = list(GRIDS) if "all" in grids else grids
    arms = grid_arms(names)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.json")
    res = run_ablation(cfg, arms, range(args.seed, args.seed + args.seeds), args.scenario,
                       args.n_train, args.n_eval, out_dir=args.out)
    print(res.table())


def cmd_plot(args):
    from . import plots
    from .perception import Checkpoint
    from .scenegen import DomainShiftConfig, SceneSpec, generate_dataset, read_dataset
    from .trainer import evaluate

    if not (args.metrics or args.checkpoint or args.adapted):
        raise UsageError("plot: give at least one of --metrics, --checkpoint, --adapted")
    if args.adapted and not (args.source and args.target):
        raise UsageError("plot: --adapted needs --source and --target")
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.metrics:
        written.append(plots.plot_loss_curves(_labelled(args.metrics), args.out / "loss_curves.png"))
    if args.checkpoint:
        scenarios = args.scenario or list(SCENARIOS)
        spec = SceneSpec()
        sets = {"clean": generate_dataset(spec, DomainShiftConfig(), args.n, args.seed)}
        for s in scenarios:
            sets[s] = generate_dataset(spec, DomainShiftConfig.preset(s), args.n, args.seed)
        scores = {}
        for label, path in _labelled(args.checkpoint).items():
            ck = Checkpoint.load(path)
            scores[label] = {k: evaluate(ck, v).mAP for k, v in sets.items()}
        (args.out / "scenario_map.json").write_text(json.dumps(scores, indent=2, sort_keys=True))
        written.append(plots.plot_scenario_bars(scores, args.out / "scenario_map.png"))
    if args.adapted:
        ck = Checkpoint.load(args.adapted)
        fs = plots.prototypes_of(ck, read_dataset(args.source))
        ft = plots.prototypes_of(ck, read_dataset(args.target))
        written.append(plots.plot_prototypes(fs, ft, args.out / "prototypes.png", args.adapted.parent.name))
    for w in written:
        print(f"wrote {w}")


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        hint = difflib.get_close_matches(argv[0], COMMANDS, n=1)
        msg = f"bevda: unknown command {argv[0]!r}"
        print(msg + (f"; did you mean {hint[0]!r}?" if hint else f"; choose from {', '.join(COMMANDS)}"),
              file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        logging.basicConfig(level=logging.INFO, format="%(message)s")
        HANDLERS[args.command](args)
    except SystemExit as e:       # --help
        return int(e.code or 0)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except Exception as e:
        print(f"bevda {argv[0]}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
