#!/usr/bin/env python3
"""Random search over the three auxiliary-loss weights on the validation split.

Each trial samples (alpha, beta, gamma) log-uniformly from [0.001, 1]^3,
trains a short budgeted run, and scores validation accuracy; the winner
and all trials are printed and optionally written to CSV.
"""

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from arl import experiments, training  # noqa: E402


def main() -> int:
    spec = experiments.SUPERVISED_SPEC
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--val-episodes", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    ds = spec.build_dataset()
    cfg = dataclasses.replace(spec.train, seed=args.seed)
    t0 = time.time()
    best, trials = training.search_weights(cfg, ds, trials=args.trials,
                                           seed=args.seed,
                                           budget_iterations=args.iterations,
                                           budget_episodes=args.val_episodes)
    for i, t in enumerate(trials):
        print(f"trial {i:2d}: alpha={t.weights.alpha:.4f} "
              f"beta={t.weights.beta:.4f} gamma={t.weights.gamma:.4f} "
              f"val {t.val_acc:.2f}", flush=True)
    print(f"winner: alpha={best.alpha:.4f} beta={best.beta:.4f} "
          f"gamma={best.gamma:.4f} ({time.time() - t0:.0f}s)")

    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "alpha", "beta", "gamma", "val_acc"])
            for i, t in enumerate(trials):
                w.writerow([i, repr(t.weights.alpha), repr(t.weights.beta),
                            repr(t.weights.gamma), repr(t.val_acc)])
        print(f"wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
