"""Command-line entry point: ``surgmtl <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..models import MtlModel, prepare_frames, save_checkpoint
from ..trainers import Trainer
from .config import PROFILES, ConfigError, ExperimentConfig, get_profile, load_config, serialize, with_overrides
from .persistence import RunLock, atomic_write_text
from .runner import build_splits, evaluate, format_table, grid, run, write_grid_configs, write_splits


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.profile) if args.config else get_profile(args.profile)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    return with_overrides(cfg, **overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    paths = write_splits(build_splits(cfg), cfg.output_dir)
    print(json.dumps(paths, indent=2))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    splits = build_splits(cfg)
    out = Path(cfg.output_dir)
    with RunLock(out):
        model = MtlModel(cfg.model_config())
        trainer = Trainer(model, cfg.regime_config())
        trainer.pretrain_cicl(prepare_frames(splits.sd_train, cfg.model.crop_size))
        path = save_checkpoint(model, out / "pretrained", stage="PRETRAIN_CICL",
                               cls_acc=trainer.history.epochs[-1]["cls_acc"])
        atomic_write_text(out / "config.txt", serialize(cfg))
    print(path)
    return 0


def _run(cfg: ExperimentConfig) -> int:
    manifest = run(cfg)
    print(json.dumps({"status": manifest.status, "phase_log": manifest.phase_log,
                      "reports": manifest.reports}, indent=2))
    return 0 if manifest.status == "success" else 1


def cmd_train(args) -> int:
    return _run(_config(args))


def cmd_adapt(args) -> int:
    return _run(with_overrides(_config(args), **{"regime.protocol": "FEW"}))


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.data, args.threshold)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_grid(args) -> int:
    cfg = _config(args)
    config_dir = Path(args.out if args.out is not None else cfg.output_dir)
    if not list(config_dir.glob("*.cfg")):
        write_grid_configs(cfg, config_dir)
    rows = grid(config_dir)
    print(format_table(rows), end="")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgmtl", description="Synthetic surgical multi-task study.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--profile", choices=PROFILES, default="desk")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")

    for verb, fn, help_ in (
        ("gen-data", cmd_gen_data, "write SD/TD train/val datasets"),
        ("pretrain", cmd_pretrain, "contrastive pretraining only"),
        ("train", cmd_train, "full run with the configured protocol"),
        ("adapt", cmd_adapt, "full run with few-shot target adaptation"),
        ("grid", cmd_grid, "run all regimes x protocols and print the summary"),
    ):
        p = sub.add_parser(verb, help=help_)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a saved dataset")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
