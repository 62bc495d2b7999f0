"""Train a small ensemble on synthetic cases and report native-grid Dice.

    python3 scripts/overfit.py --epochs 60 --patch 32,32,16
"""

import argparse
import json
import logging

from petseg.cli import set_threads
from petseg.pipeline import overfit_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--patch", default="32,32,16", help="patch size x,y,z")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    set_threads(args.threads)
    res = overfit_experiment(
        folds=args.folds,
        epochs=args.epochs,
        patch_size=tuple(int(s) for s in args.patch.split(",")),
        levels=args.levels,
        base_channels=args.base_channels,
        seed=args.seed,
    )
    print(json.dumps({
        "train_dice": res.train_dice,
        "val_dice": res.val_dice,
        "mean_train_dice": res.mean_train_dice,
        "mean_val_dice": res.mean_val_dice,
        "best_epochs": [c.epoch for c in res.checkpoints],
        "seconds": round(res.seconds, 1),
    }, indent=2))


if __name__ == "__main__":
    main()
