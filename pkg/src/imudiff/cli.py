"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 configuration error, 2 stage-order error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ExperimentConfig
from .errors import ImuDiffError
from .pipeline import Pipeline

log = logging.getLogger("imudiff")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--profile", choices=("full", "desk"), help="full run or scaled-down desk run")
    p.add_argument("--jobs", type=int, default=1, help="parallel (fold, class) workers")
    p.add_argument("-v", "--verbose", action="store_true")


def _selection(p: argparse.ArgumentParser):
    p.add_argument("--fold", type=int, action="append", dest="folds", help="held-out participant id (repeatable)")
    p.add_argument("--activity", action="append", dest="activities", help="activity name (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imudiff", description="Diffusion-based IMU augmentation pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a config file with every default")
    p.add_argument("path", type=Path)
    p.add_argument("--manifest", default="manifest.json")
    p.add_argument("--out", default="runs/default")

    p = sub.add_parser("ingest", help="parse, window and standardize the recordings")
    _common(p)
    p = sub.add_parser("train-diffusion", help="train one denoiser per (fold, activity)")
    _common(p)
    _selection(p)
    p = sub.add_parser("synthesize", help="generate synthetic window pools")
    _common(p)
    _selection(p)
    p = sub.add_parser("evaluate", help="LOSOCV for the classifier variants")
    _common(p)
    p.add_argument("--fold", type=int, action="append", dest="folds")
    p.add_argument("--variant", action="append", dest="variants")
    p = sub.add_parser("sweep", help="macro-F1 against synthetic fraction")
    _common(p)
    p.add_argument("--fold", type=int, action="append", dest="folds")
    p = sub.add_parser("cluster", help="DTW k-means on one activity and axis")
    _common(p)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--activity", required=True)
    p.add_argument("--axis", type=int, required=True)
    p.add_argument("--source", choices=("real", "synthetic", "both"), default="both")
    p.add_argument("-k", type=int)
    p = sub.add_parser("export-features", help="flat feature table of standardized windows")
    _common(p)
    p.add_argument("--fold", type=int)
    p.add_argument("--synthetic", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.profile is not None:
        overrides["profile"] = args.profile
    cfg = replace(cfg, **overrides) if overrides else cfg
    if args.config and not Path(cfg.manifest).is_absolute():
        # manifest paths in a config file are relative to that file
        cfg = replace(cfg, manifest=str(Path(args.config).parent / cfg.manifest))
    return cfg


def run(args) -> int:
    if args.command == "init-config":
        cfg = ExperimentConfig(manifest=args.manifest, out=args.out)
        args.path.parent.mkdir(parents=True, exist_ok=True)
        args.path.write_text(cfg.to_json() + "\n")
        print(args.path)
        return 0

    pipe = Pipeline(load_config(args), jobs=args.jobs)
    cmd = args.command
    if cmd == "ingest":
        summary = pipe.ingest()
        counts = summary["windows_per_pid_class"]
        for pid in sorted(counts, key=int):
            print(f"pid {pid}: " + " ".join(f"{a}={n}" for a, n in counts[pid].items()))
    elif cmd == "train-diffusion":
        for p in pipe.train_diffusion(args.folds, args.activities):
            print(p)
    elif cmd == "synthesize":
        for p in pipe.synthesize(args.folds, args.activities):
            print(p)
    elif cmd == "evaluate":
        p = pipe.evaluate(args.folds, args.variants)
        print(p.with_suffix(".txt").read_text())
    elif cmd == "sweep":
        print(pipe.sweep(args.folds))
    elif cmd == "cluster":
        print(pipe.cluster(args.fold, args.activity, args.axis, args.source, args.k))
    elif cmd == "export-features":
        print(pipe.export(args.fold, args.synthetic))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except ImuDiffError as exc:
        print(f"imudiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
