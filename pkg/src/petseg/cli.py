"""``petseg`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import pipeline
from .metrics import summarize
from .pipeline import RunConfig

log = logging.getLogger("petseg")

COMMANDS = ("synth", "preprocess", "train", "predict", "evaluate")


def set_threads(n: int) -> None:
    """Bound numba and BLAS parallelism; ``1`` gives bitwise-reproducible runs."""
    import numba
    from threadpoolctl import threadpool_limits

    # never exceed the cores we may run on: spinning BLAS threads on a
    # shared core are several times slower than one thread
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
    n = max(1, min(int(n), cores))
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    threadpool_limits(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petseg", description="PET/CT lesion segmentation pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, help="bound on internal parallelism")
    p.add_argument("--epochs", type=int, help="training epochs (overrides config)")
    p.add_argument("--folds", type=int, help="ensemble folds (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    train_kw = {}
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    if args.folds is not None:
        train_kw["folds"] = args.folds
    train_kw["seed"] = cfg.seed
    cfg.train = replace(cfg.train, **train_kw)
    return cfg


def run(cfg: RunConfig, command: str, out=None) -> None:
    out = out or sys.stdout
    if command == "synth":
        ids = pipeline.run_synth(cfg)
        print(json.dumps({"command": "synth", "cases": len(ids), "dir": cfg.data_dir}), file=out)
    elif command == "preprocess":
        ids = pipeline.run_preprocess(cfg)
        print(json.dumps({"command": "preprocess", "cases": len(ids)}), file=out)
    elif command == "train":
        paths = pipeline.run_train(cfg)
        print(json.dumps({"command": "train", "checkpoints": [str(p) for p in paths]}), file=out)
    elif command == "predict":
        paths = pipeline.run_predict(cfg)
        print(json.dumps({"command": "predict", "predictions": len(paths)}), file=out)
    elif command == "evaluate":
        reports = pipeline.run_evaluate(cfg)
        for r in reports:
            print(json.dumps(r.as_row()), file=out)
        print(json.dumps({"summary": summarize(reports)}), file=out)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        set_threads(cfg.threads)
        run(cfg, args.command)
    except (pipeline.CaseError, ValueError, OSError, KeyError) as exc:
        print(f"petseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
