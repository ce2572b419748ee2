"""Command-line entry point.

Subcommands: gen, train, train-unsup, eval, gradcheck, sweep-p, labelgen.
Exit codes are a stable contract: 0 ok, 2 config/data error, 3 divergence,
4 descriptor mismatch, 5 gradcheck failure. `ARL_SEED` serves as the seed
fallback wherever a seed flag or config key is left unset. Every
subcommand is deterministic under a fixed seed with --threads 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import (ArlError, ConfigError, DescriptorMismatchError,
                     NonFiniteLossError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_GRADCHECK = 5


def _resolve_seed(explicit, default: int = 0) -> int:
    if explicit is not None:
        return explicit
    env = os.environ.get("ARL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ARL_SEED must be an integer, got '{env}'") from None
    return default


def _load_run_config(path: str):
    from .config import load_run_config

    return load_run_config(path, env_seed=os.environ.get("ARL_SEED"))


def _load_dataset(run):
    """Dataset from the manifest path if set, else the synthetic spec."""
    from . import datasets

    if run.data:
        return datasets.load_manifest(run.data, split_seed=run.split_seed)
    ds = datasets.generate_synthetic(seed=run.synthetic_seed,
                                     n_classes=run.synthetic_classes,
                                     per_class=run.synthetic_per_class,
                                     side=run.synthetic_side)
    datasets.assign_splits(ds, seed=run.split_seed)
    return ds


def _check_descriptor(desc, dataset):
    """The checkpoint must have been built against a matching dataset."""
    from .datasets import KEY_DIM

    expect = {"image_size": dataset.image_size}
    if desc.mode == "supervised":
        expect["attr_dim"] = dataset.attr_dim
        expect["class_dim"] = len(dataset.split_records("train"))
    else:
        expect["attr_dim"] = KEY_DIM
        expect["class_dim"] = KEY_DIM
    got = {k: getattr(desc, k) for k in expect}
    if got != expect:
        raise DescriptorMismatchError(
            f"checkpoint descriptor {got} does not match dataset {expect}")


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    from . import datasets

    seed = _resolve_seed(args.seed)
    ds = datasets.generate_synthetic(seed=seed, n_classes=args.classes,
                                     per_class=args.per_class, side=args.side)
    datasets.save_dataset(ds, args.out)
    n = args.classes * args.per_class
    print(f"wrote {n} images across {args.classes} classes to {args.out}")
    return EXIT_OK


def _run_training(args, mode: str) -> int:
    from . import training
    from .arlnet import load_checkpoint, save_checkpoint
    from .config import format_run_config

    run = _load_run_config(args.config)
    if run.train.mode != mode:
        raise ConfigError(
            f"config has mode '{run.train.mode}' but this subcommand trains "
            f"'{mode}' models")
    if args.out is not None:
        run.out = args.out
    outdir = Path(run.out)
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt_path = outdir / "model.ckpt"
    metrics_path = outdir / "metrics.jsonl"

    net = None
    start_iteration = 0
    if args.resume:
        if not ckpt_path.exists():
            raise ConfigError(f"--resume: no checkpoint at {ckpt_path}")
        net, start_iteration = load_checkpoint(str(ckpt_path))

    dataset = _load_dataset(run)
    (outdir / "config.frozen").write_text(format_run_config(run),
                                          encoding="utf-8")
    with open(metrics_path, "a" if args.resume else "w", encoding="utf-8") as fh:
        def sink(record):
            fh.write(json.dumps(record) + "\n")

        if mode == "supervised":
            trainer = (training.train_baseline if run.variant == "baseline"
                       else training.train_supervised)
            result = trainer(run.train, dataset, net=net,
                             start_iteration=start_iteration, metrics_sink=sink)
        else:
            result = training.train_unsupervised(
                run.train, dataset, net=net, start_iteration=start_iteration,
                metrics_sink=sink, use_arl=run.variant != "baseline")

    save_checkpoint(str(ckpt_path), result.net, iteration=result.iteration)
    print(f"trained to iteration {result.iteration}; "
          f"checkpoint {ckpt_path}, metrics {metrics_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, "supervised")


def cmd_train_unsup(args) -> int:
    return _run_training(args, "unsupervised")


def cmd_eval(args) -> int:
    import numpy as np

    from . import training
    from .arlnet import load_checkpoint

    seed = _resolve_seed(args.seed)
    net, _ = load_checkpoint(args.ckpt)
    run = _load_run_config(args.config)
    dataset = _load_dataset(run)
    _check_descriptor(net.desc, dataset)

    outdir = Path(args.out) if args.out is not None else Path(args.ckpt).parent
    outdir.mkdir(parents=True, exist_ok=True)
    scores_dir = outdir / "scores"
    scores_dir.mkdir(exist_ok=True)

    def dump(e: int, episode, scores: np.ndarray):
        np.savetxt(scores_dir / f"ep{e:05d}.csv", scores, delimiter=",")

    report = training.evaluate(net, dataset, args.L, args.Z, args.Q,
                               args.episodes, seed, split=args.split,
                               threads=args.threads, dump=dump)
    print(f"{report.acc:.2f} ± {report.ci95:.2f}")
    (outdir / "eval.json").write_text(json.dumps(report.to_json()) + "\n",
                                      encoding="utf-8")
    with open(outdir / "episodes.csv", "w", encoding="utf-8") as fh:
        fh.write("episode,accuracy\n")
        for e, acc in enumerate(report.per_episode):
            fh.write(f"{e},{float(acc)!r}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results, ok = gradcheck.run_suite(args.precision,
                                      seed=_resolve_seed(args.seed))
    print(gradcheck.format_table(results))
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_sweep_p(args) -> int:
    import dataclasses

    from . import training

    run = _load_run_config(args.config)
    if run.train.mode != "supervised":
        raise ConfigError("sweep-p needs a supervised config")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated floats, "
                          f"got '{args.values}'") from None
    if not values:
        raise ConfigError("--values is empty")
    outdir = Path(run.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(run)

    rows = []
    for p in values:
        cfg = dataclasses.replace(run.train, p=p)
        trainer = (training.train_baseline if run.variant == "baseline"
                   else training.train_supervised)
        result = trainer(cfg, dataset)
        report = training.evaluate(result.net, dataset, cfg.L, cfg.Z, cfg.Q,
                                   cfg.eval_episodes, cfg.seed, split="val",
                                   threads=args.threads)
        rows.append((p, report.acc, report.ci95))
        print(f"p={p}: {report.acc:.2f} ± {report.ci95:.2f}")

    csv_path = outdir / "sweep_p.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("p,acc,ci95\n")
        for p, acc, ci in rows:
            fh.write(f"{p!r},{acc!r},{ci!r}\n")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_labelgen(args) -> int:
    import numpy as np

    from . import relabel
    from .datasets import sample_episode

    run = _load_run_config(args.config)
    dataset = _load_dataset(run)
    episode_seed = _resolve_seed(args.episode_seed)
    episode = sample_episode(dataset, args.L, args.Z, args.Q, args.split,
                             episode_seed)
    chat, ahat = relabel.episode_pair_targets(episode, p=args.p,
                                              pair_mode="all_pairs")
    outdir = Path(run.out)
    outdir.mkdir(parents=True, exist_ok=True)
    np.savetxt(outdir / "labels_chat.csv", chat, delimiter=",")
    np.savetxt(outdir / "labels_ahat.csv", ahat, delimiter=",")
    print(f"wrote {outdir / 'labels_chat.csv'} and {outdir / 'labels_ahat.csv'} "
          f"({chat.shape[0]}x{chat.shape[1]})")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arl",
        description="Few-shot relation learning with absolute/relative "
                    "feedback on a synthetic attributed dataset.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic dataset to disk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    for name, func in (("train", cmd_train), ("train-unsup", cmd_train_unsup)):
        p = sub.add_parser(name, help=f"{name} from a key=value config file")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None,
                       help="override the config's output directory")
        p.add_argument("--resume", action="store_true",
                       help="continue from model.ckpt in the output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True,
                   help="config naming the dataset (manifest or synthetic spec)")
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--Z", type=int, default=1)
    p.add_argument("--Q", type=int, default=5)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None,
                   help="output directory (default: the checkpoint's)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--precision", default="f64", choices=("f32", "f64"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-p", help="train+validate across soft-label exponents")
    p.add_argument("--values", required=True,
                   help="comma-separated p values, e.g. 0.5,1,2,4")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sweep_p)

    p = sub.add_parser("labelgen", help="dump one episode's pairwise label matrices")
    p.add_argument("--episode-seed", type=int, default=None)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--config", required=True)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--Z", type=int, default=1)
    p.add_argument("--Q", type=int, default=5)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_labelgen)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DescriptorMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ArlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
