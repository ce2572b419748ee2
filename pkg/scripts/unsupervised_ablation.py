#!/usr/bin/env python3
"""Paired unsupervised ablation: contrastive training with vs without the
augmentation-key auxiliary losses and feedback.

Both variants never see class labels during training; evaluation is the
standard episodic protocol on the held-out test classes.
"""

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from arl import experiments  # noqa: E402


def main() -> int:
    spec = experiments.UNSUPERVISED_SPEC
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default=",".join(str(s) for s in spec.seeds))
    ap.add_argument("--iterations", type=int, default=spec.train.iterations)
    ap.add_argument("--eval-episodes", type=int, default=spec.eval_episodes)
    ap.add_argument("--enc", type=int, default=spec.train.enc_channels)
    ap.add_argument("--csv", default=None, help="write per-seed rows here")
    args = ap.parse_args()

    seeds = tuple(int(s) for s in args.seeds.split(","))
    train = dataclasses.replace(spec.train, iterations=args.iterations,
                                enc_channels=args.enc,
                                trunk_channels=args.enc)
    spec = dataclasses.replace(spec, train=train, seeds=seeds,
                               eval_episodes=args.eval_episodes)

    t0 = time.time()

    def log(run):
        print(f"  seed {run.seed}: full {run.full_acc:.2f} "
              f"control {run.control_acc:.2f} margin {run.margin:+.2f} "
              f"[{time.time() - t0:.0f}s]", flush=True)

    result = experiments.run_ablation(spec, "unsupervised", log=log)
    print(result.table())
    print(f"wins at +0.0pp: {result.wins(0.0)}/{len(result.runs)}; "
          f"all above 30%: "
          f"{all(min(r.full_acc, r.control_acc) > 30.0 for r in result.runs)} "
          f"({time.time() - t0:.0f}s total)")

    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "full_acc", "control_acc", "margin"])
            for r in result.runs:
                w.writerow([r.seed, repr(r.full_acc), repr(r.control_acc),
                            repr(r.margin)])
        print(f"wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
