"""Paired ablations on the synthetic dataset: full model vs. control.

Each ablation trains the full configuration and its stripped control
(no feedback, all auxiliary weights zero) from the same per-seed init
stream on the same data, then evaluates both on the same frozen episode
sequence, so per-seed accuracy differences isolate the mechanism under
test. The frozen specs at the bottom are calibrated desk-scale budgets;
scripts may override any field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import datasets, training
from .training import LossWeights, TrainConfig


@dataclass
class AblationRun:
    seed: int
    full_acc: float      # percent
    control_acc: float   # percent

    @property
    def margin(self) -> float:
        return self.full_acc - self.control_acc


@dataclass
class AblationResult:
    runs: list[AblationRun]
    eval_episodes: int

    def wins(self, margin: float = 0.0) -> int:
        return sum(1 for r in self.runs if r.margin >= margin)

    @property
    def mean_full(self) -> float:
        return sum(r.full_acc for r in self.runs) / len(self.runs)

    @property
    def mean_control(self) -> float:
        return sum(r.control_acc for r in self.runs) / len(self.runs)

    def table(self) -> str:
        lines = [f"{'seed':>4s} {'full':>7s} {'control':>8s} {'margin':>7s}"]
        for r in self.runs:
            lines.append(f"{r.seed:4d} {r.full_acc:7.2f} {r.control_acc:8.2f} "
                         f"{r.margin:+7.2f}")
        lines.append(f"mean {self.mean_full:7.2f} {self.mean_control:8.2f} "
                     f"{self.mean_full - self.mean_control:+7.2f}")
        return "\n".join(lines)


@dataclass
class AblationSpec:
    """Everything needed to reproduce one paired comparison."""

    train: TrainConfig
    seeds: tuple = (0, 1, 2, 3, 4)
    dataset_seed: int = 7
    n_classes: int = 32
    per_class: int = 20
    side: int = 32
    split_counts: tuple = (20, 6, 6)
    split_seed: int = 0
    eval_episodes: int = 200
    eval_seed: int = 1234
    eval_split: str = "test"

    def build_dataset(self) -> datasets.Dataset:
        ds = datasets.generate_synthetic(seed=self.dataset_seed,
                                         n_classes=self.n_classes,
                                         per_class=self.per_class,
                                         side=self.side)
        datasets.assign_splits(ds, seed=self.split_seed,
                               counts=self.split_counts)
        return ds


def _control_config(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(cfg, absolute_feedback=False,
                               relative_feedback=False,
                               weights=LossWeights(0.0, 0.0, 0.0))


def _eval(spec: AblationSpec, net, ds) -> float:
    report = training.evaluate(net, ds, spec.train.L, spec.train.Z,
                               spec.train.Q, spec.eval_episodes,
                               spec.eval_seed, split=spec.eval_split)
    return report.acc


def run_supervised_pair(spec: AblationSpec, seed: int, ds=None,
                        log=None) -> AblationRun:
    ds = spec.build_dataset() if ds is None else ds
    full_cfg = dataclasses.replace(spec.train, seed=seed)
    ctrl_cfg = _control_config(full_cfg)
    full = training.train_supervised(full_cfg, ds)
    ctrl = training.train_baseline(ctrl_cfg, ds)
    run = AblationRun(seed=seed, full_acc=_eval(spec, full.net, ds),
                      control_acc=_eval(spec, ctrl.net, ds))
    if log is not None:
        log(run)
    return run


def run_unsupervised_pair(spec: AblationSpec, seed: int, ds=None,
                          log=None) -> AblationRun:
    ds = spec.build_dataset() if ds is None else ds
    full_cfg = dataclasses.replace(spec.train, seed=seed)
    ctrl_cfg = _control_config(full_cfg)
    full = training.train_unsupervised(full_cfg, ds, use_arl=True)
    ctrl = training.train_unsupervised(ctrl_cfg, ds, use_arl=False)
    run = AblationRun(seed=seed, full_acc=_eval(spec, full.net, ds),
                      control_acc=_eval(spec, ctrl.net, ds))
    if log is not None:
        log(run)
    return run


def run_ablation(spec: AblationSpec, kind: str, log=None) -> AblationResult:
    runner = {"supervised": run_supervised_pair,
              "unsupervised": run_unsupervised_pair}[kind]
    ds = spec.build_dataset()
    runs = [runner(spec, seed, ds=ds, log=log) for seed in spec.seeds]
    return AblationResult(runs=runs, eval_episodes=spec.eval_episodes)


# -- frozen desk-scale budgets ---------------------------------------------------

SUPERVISED_SPEC = AblationSpec(
    train=TrainConfig(
        mode="supervised", L=5, Z=1, Q=5, p=2.0,
        weights=LossWeights(0.5, 0.5, 0.5),
        enc_channels=32, trunk_channels=32,
        lr=1e-3, decay_period=600, iterations=1200,
        log_every=50,
    ),
)

UNSUPERVISED_SPEC = AblationSpec(
    train=TrainConfig(
        mode="unsupervised", L=5, Z=1, Q=5, M=4, n_pairs=2, p=2.0,
        weights=LossWeights(0.5, 0.5, 0.5),
        enc_channels=32, trunk_channels=32,
        lr=1e-3, decay_period=800, iterations=1600,
        log_every=50,
    ),
)
