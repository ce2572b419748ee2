"""Losses, optimizer, training loops, weight search, and episodic evaluation.

The combined objective is L_relc + alpha*L_rels + beta*L_absc + gamma*L_abss.
Pairwise losses are mean-reduced so the weight ranges do not depend on
episode size; the unsupervised contrastive loss keeps its unreduced
Frobenius form. A weight of exactly 0 disables its term: the loss is never
built, so no gradients flow and the metric line records 0.0 for it.

Determinism contract: with a fixed config and seed, single-threaded runs
produce bit-identical metric streams. Episode seeds derive from
(seed, iteration), and each sub-network's initialization stream is keyed
by its name, so a full net and a baseline share encoder/trunk/head weights
bit-for-bit under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import relabel
from .arlnet import (ArchDescriptor, ArlNet, BaselineNet,
                     init_identity_stats, stats_initialized, zero_grads)
from .autodiff import Tensor
from .datasets import (KEY_DIM, Dataset, episode_seed_for, sample_episode,
                       sample_unsup_batch)
from .errors import (ConfigError, ContractError, DimensionError,
                     NonFiniteLossError)


# -- loss functions ----------------------------------------------------------


def loss_relc(pred: Tensor, targets) -> Tensor:
    """Mean squared error of class-relation predictions against 0/1 targets."""
    t = np.asarray(targets, dtype=pred.dtype).reshape(-1)
    if pred.size != t.size:
        raise DimensionError(
            f"loss_relc: {pred.size} predictions vs {t.size} targets")
    d = ad.sub(ad.reshape(pred, (t.size,)), t)
    return ad.tmean(ad.mul(d, d))


def loss_rels(pred: Tensor, targets) -> Tensor:
    """Mean squared error of soft-relation predictions against RBF targets.

    A (P,) target vector supervises every column of a (P, B) prediction.
    """
    t = np.asarray(targets, dtype=pred.dtype)
    if t.ndim == 1:
        if pred.shape[0] != t.shape[0]:
            raise DimensionError(
                f"loss_rels: {pred.shape[0]} predictions vs {t.shape[0]} targets")
        t = np.broadcast_to(t[:, None], pred.shape)
    elif t.shape != pred.shape:
        raise DimensionError(
            f"loss_rels: target shape {t.shape} vs prediction shape {pred.shape}")
    d = ad.sub(pred, t)
    return ad.tmean(ad.mul(d, d))


def loss_absc(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over class logits, max-shifted for stability."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise DimensionError(f"loss_absc: {n} logit rows vs {t.shape[0]} targets")
    if t.min() < 0 or t.max() >= c:
        raise ContractError(
            f"loss_absc: target outside [0, {c}): {int(t.min())}..{int(t.max())}")
    ls = ad.log_softmax(logits, axis=1)
    picked = ad.gather_rows(ad.reshape(ls, (n * c,)), np.arange(n) * c + t)
    return ad.neg(ad.tmean(picked))


def loss_abss(pred: Tensor, targets) -> Tensor:
    """Mean over samples of the squared l2 distance to the attribute target."""
    t = np.asarray(targets, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(
            f"loss_abss: target shape {t.shape} vs prediction shape {pred.shape}")
    d = ad.sub(pred, t)
    return ad.tmean(ad.tsum(ad.mul(d, d), axis=1))


def loss_urn(zeta: Tensor, zeta_star: Tensor, zeta_cross: Tensor) -> Tensor:
    """Unreduced contrastive objective: within-source entries are pulled to 1,
    cross-source entries to 0, as squared Frobenius norms."""
    if not (zeta.shape == zeta_star.shape == zeta_cross.shape):
        raise DimensionError(
            f"loss_urn: grid shapes differ: {zeta.shape}, {zeta_star.shape}, "
            f"{zeta_cross.shape}")
    d1 = ad.sub(zeta, 1.0)
    d2 = ad.sub(zeta_star, 1.0)
    return (ad.tsum(ad.mul(d1, d1)) + ad.tsum(ad.mul(d2, d2))
            + ad.tsum(ad.mul(zeta_cross, zeta_cross)))


def loss_key_bits(logits: Tensor, key_bits) -> Tensor:
    """Per-bit binary cross-entropy of key-bit logits (mean over all bits)."""
    return ad.bce_with_logits(logits, np.asarray(key_bits, dtype=logits.dtype))


@dataclass
class LossWeights:
    """Per-learner weights; 0 disables a learner, else values live in [0.001, 1]."""

    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if v != 0.0 and not 0.001 <= v <= 1.0:
                raise ConfigError(
                    f"weight {name}={v} must be 0 or within [0.001, 1]")


def combined_objective(l_relc: Tensor, l_rels, l_absc, l_abss,
                       weights: LossWeights) -> Tensor:
    """L_relc + alpha*L_rels + beta*L_absc + gamma*L_abss (zero terms skipped)."""
    total = l_relc
    for w, term in ((weights.alpha, l_rels), (weights.beta, l_absc),
                    (weights.gamma, l_abss)):
        if w != 0.0:
            if term is None:
                raise ContractError("weighted loss term was not computed")
            total = ad.add(total, ad.mul(term, w))
    return total


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; state per named parameter."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(iteration: int, base_lr: float, decay_period: int) -> float:
    """Step schedule: the rate halves every ``decay_period`` iterations."""
    return base_lr * 0.5 ** (iteration // decay_period)


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "supervised"        # 'supervised' | 'unsupervised'
    L: int = 5
    Z: int = 1
    Q: int = 5
    M: int = 4                      # augmentations per source (unsupervised)
    n_pairs: int = 1                # source pairs per unsupervised iteration
    p: float = 2.0                  # soft-label norm exponent
    pair_mode: str = "support_query"
    weights: LossWeights = field(default_factory=LossWeights)
    absolute_feedback: bool = True
    relative_feedback: bool = True
    feedback_detach: bool = False
    enc_channels: int = 64
    trunk_channels: int = 64
    rel_hidden: int = 8
    b_dim: int = 1
    precision: str = "f32"
    lr: float = 1e-3
    decay_period: int = 5000
    iterations: int = 20000
    seed: int = 0
    eval_episodes: int = 1000
    log_every: int = 10

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        positive = ("L", "Z", "Q", "M", "n_pairs", "lr", "decay_period",
                    "eval_episodes", "log_every", "p")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.mode == "unsupervised" and self.M < 2:
            raise ConfigError("unsupervised mode needs M >= 2")


def build_descriptor(config: TrainConfig, dataset: Dataset,
                     baseline: bool = False) -> ArchDescriptor:
    if config.mode == "unsupervised":
        class_dim, attr_dim = KEY_DIM, KEY_DIM
    else:
        class_dim = len(dataset.split_records("train"))
        attr_dim = dataset.attr_dim
    return ArchDescriptor(
        image_size=dataset.image_size,
        enc_channels=config.enc_channels,
        trunk_channels=config.trunk_channels,
        class_dim=class_dim,
        attr_dim=attr_dim,
        rel_hidden=config.rel_hidden,
        b_dim=config.b_dim,
        absolute_feedback=False if baseline else config.absolute_feedback,
        relative_feedback=False if baseline else config.relative_feedback,
        feedback_detach=config.feedback_detach,
        mode=config.mode,
        precision=config.precision,
    )


def train_vocabulary(dataset: Dataset) -> np.ndarray:
    """Global class ids of the training split, in stable order."""
    return np.array([dataset.records[r].class_id
                     for r in dataset.split_records("train")], dtype=np.int64)


@dataclass
class TrainResult:
    net: object
    metrics: list
    iteration: int


# -- training loops ------------------------------------------------------------


def _emit(metrics, sink, record):
    metrics.append(record)
    if sink is not None:
        sink(record)


def train_supervised(config: TrainConfig, dataset: Dataset, net=None,
                     start_iteration: int = 0, metrics_sink=None) -> TrainResult:
    """Episodic supervised loop over the full objective.

    ``net`` may be a preloaded model (checkpoint resume); iteration count
    continues from ``start_iteration``. Aborts with a non-finite-loss error
    if the objective leaves the reals.
    """
    if config.mode != "supervised":
        raise ConfigError(f"train_supervised got mode '{config.mode}'")
    if net is None:
        net = ArlNet(build_descriptor(config, dataset), seed=config.seed)
    vocab = train_vocabulary(dataset)
    w = config.weights
    return _episodic_loop(config, dataset, net, vocab, w, start_iteration,
                          metrics_sink)


def train_baseline(config: TrainConfig, dataset: Dataset, net=None,
                   start_iteration: int = 0, metrics_sink=None) -> TrainResult:
    """Reference loop: relation pathway only, all auxiliary learners absent."""
    if net is None:
        net = BaselineNet(build_descriptor(config, dataset, baseline=True),
                          seed=config.seed)
    return _episodic_loop(config, dataset, net, train_vocabulary(dataset),
                          LossWeights(0.0, 0.0, 0.0), start_iteration,
                          metrics_sink)


def _episodic_loop(config, dataset, net, vocab, w, start_iteration, metrics_sink):
    opt = Adam(net.named_parameters(), lr=config.lr)
    metrics = []
    for it in range(start_iteration, config.iterations):
        lr = lr_at(it, config.lr, config.decay_period)
        episode = sample_episode(dataset, config.L, config.Z, config.Q, "train",
                                 episode_seed_for(config.seed, it))
        bundle = net.forward_supervised(episode, train=True, update_stats=True,
                                        pair_mode=config.pair_mode)
        chat, ahat = relabel.episode_pair_targets(episode, config.p,
                                                  config.pair_mode)
        l_relc = loss_relc(bundle.c_rel, chat.reshape(-1))
        l_rels = l_absc = l_abss = None
        if w.alpha != 0.0:
            l_rels = loss_rels(bundle.a_rel, ahat.reshape(-1))
        if w.beta != 0.0 or w.gamma != 0.0:
            cls_t, attr_t = relabel.absolute_targets(episode, vocab)
            if w.beta != 0.0:
                l_absc = loss_absc(bundle.class_logits, cls_t)
            if w.gamma != 0.0:
                l_abss = loss_abss(bundle.attr_pred, attr_t)
        total = combined_objective(l_relc, l_rels, l_absc, l_abss, w)

        total_val = total.item()
        if not np.isfinite(total_val):
            raise NonFiniteLossError(it)
        if it % config.log_every == 0:
            _emit(metrics, metrics_sink, {
                "iter": it,
                "L_relc": l_relc.item(),
                "L_rels": l_rels.item() if l_rels is not None else 0.0,
                "L_absc": l_absc.item() if l_absc is not None else 0.0,
                "L_abss": l_abss.item() if l_abss is not None else 0.0,
                "total": total_val,
                "lr": lr,
            })
        zero_grads(net)
        total.backward()
        opt.step(lr)
    final_it = max(start_iteration, config.iterations)

    if not stats_initialized(net):
        # a zero-iteration run still yields an evaluable (chance-level)
        # model: identity stats keep normalization information-free
        init_identity_stats(net)
    return TrainResult(net=net, metrics=metrics, iteration=final_it)


def train_unsupervised(config: TrainConfig, dataset: Dataset, net=None,
                       start_iteration: int = 0, metrics_sink=None,
                       use_arl: bool = True) -> TrainResult:
    """Contrastive loop on augmented pairs; classes are never visible.

    The relation targets follow the push/pull structure (within-source
    grids to 1, cross-source to 0) plus key-bit analogues of the
    soft-relation and absolute losses. With all weights 0 and ``use_arl``
    False this is the plain unsupervised baseline. The contrastive term is
    logged in the L_relc column.

    Normalization stats policy: training forwards normalize by batch
    statistics and never write the running buffers — the loop only ever
    sees augmented views (rotated/flipped/rescaled/jittered), whose
    channel moments do not describe the raw images used at evaluation.
    Committing them is actively harmful (measured: augmented running
    stats push the relation head into a confident but class-inverted
    regime on raw inputs, scoring far below chance). The buffers are
    left as the identity transform instead, which keeps the head in the
    low-score region where its learned ordering transfers.
    """
    if config.mode != "unsupervised":
        raise ConfigError(f"train_unsupervised got mode '{config.mode}'")
    if net is None:
        desc = build_descriptor(config, dataset, baseline=not use_arl)
        net = ArlNet(desc, seed=config.seed)
    w = config.weights
    opt = Adam(net.named_parameters(), lr=config.lr)
    metrics = []
    for it in range(start_iteration, config.iterations):
        lr = lr_at(it, config.lr, config.decay_period)
        rng = np.random.default_rng(episode_seed_for(config.seed, it))
        groups = sample_unsup_batch(dataset, config.n_pairs, config.M, rng)

        l_urn_sum = None
        l_rels_sum = None
        l_absc_sum = None
        l_abss_sum = None
        for pair in groups:
            bundle = net.forward_unsupervised(pair.x_views, pair.y_views,
                                              train=True, update_stats=False)
            term = loss_urn(bundle.zeta, bundle.zeta_star, bundle.zeta_cross)
            l_urn_sum = term if l_urn_sum is None else ad.add(l_urn_sum, term)
            if w.alpha != 0.0:
                _, axx = relabel.unsup_pair_matrices(pair.x_keys, pair.x_keys, config.p)
                _, ayy = relabel.unsup_pair_matrices(pair.y_keys, pair.y_keys, config.p)
                _, axy = relabel.unsup_pair_matrices(pair.x_keys, pair.y_keys, config.p)
                pred = ad.concat([bundle.a_rel_xx, bundle.a_rel_yy, bundle.a_rel_xy],
                                 axis=0)
                target = np.concatenate([axx.reshape(-1), ayy.reshape(-1),
                                         axy.reshape(-1)])
                term = loss_rels(pred, target)
                l_rels_sum = term if l_rels_sum is None else ad.add(l_rels_sum, term)
            if w.beta != 0.0 or w.gamma != 0.0:
                bits = relabel.key_matrix(pair.x_keys + pair.y_keys)
                if w.beta != 0.0:
                    term = loss_key_bits(bundle.class_logits, bits)
                    l_absc_sum = term if l_absc_sum is None else ad.add(l_absc_sum, term)
                if w.gamma != 0.0:
                    term = loss_abss(bundle.attr_pred, bits)
                    l_abss_sum = term if l_abss_sum is None else ad.add(l_abss_sum, term)

        scale = 1.0 / len(groups)
        l_urn = ad.mul(l_urn_sum, scale)
        l_rels = ad.mul(l_rels_sum, scale) if l_rels_sum is not None else None
        l_absc = ad.mul(l_absc_sum, scale) if l_absc_sum is not None else None
        l_abss = ad.mul(l_abss_sum, scale) if l_abss_sum is not None else None
        total = combined_objective(l_urn, l_rels, l_absc, l_abss, w)

        total_val = total.item()
        if not np.isfinite(total_val):
            raise NonFiniteLossError(it)
        if it % config.log_every == 0:
            _emit(metrics, metrics_sink, {
                "iter": it,
                "L_relc": l_urn.item(),
                "L_rels": l_rels.item() if l_rels is not None else 0.0,
                "L_absc": l_absc.item() if l_absc is not None else 0.0,
                "L_abss": l_abss.item() if l_abss is not None else 0.0,
                "total": total_val,
                "lr": lr,
            })
        zero_grads(net)
        total.backward()
        opt.step(lr)
    if not stats_initialized(net):
        init_identity_stats(net)
    return TrainResult(net=net, metrics=metrics,
                       iteration=max(start_iteration, config.iterations))


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    acc: float                    # mean episode accuracy in percent, [0, 100]
    ci95: float                   # 1.96 * std / sqrt(n), percentage points
    per_episode: np.ndarray       # percent as well
    episodes: int
    way: int
    shot: int

    def to_json(self) -> dict:
        return {"acc": self.acc, "ci95": self.ci95, "episodes": self.episodes,
                "L": self.way, "Z": self.shot}


def score_episode(net, episode) -> np.ndarray:
    """(L, L*Q) class-relation score grid for one episode, no grad, frozen stats."""
    with ad.no_grad():
        bundle = net.forward_supervised(episode, train=False, update_stats=False,
                                        pair_mode="support_query")
    return bundle.c_rel.data.reshape(episode.way, episode.way * episode.queries)


def episode_accuracy(scores: np.ndarray, query_local: np.ndarray) -> float:
    """Fraction of queries whose argmax row matches their class."""
    pred = np.argmax(scores, axis=0)
    return float(np.mean(pred == query_local))


def evaluate(net, dataset: Dataset, L: int, Z: int, Q: int, n_episodes: int,
             seed: int, split: str = "test", threads: int = 1,
             dump=None) -> EvalReport:
    """Episodic evaluation; optionally dumps each score grid via ``dump``.

    ``threads > 1`` maps episodes over a pool; reduction is by episode
    index, so parallel and serial runs agree exactly.
    """
    def run_one(e: int):
        episode = sample_episode(dataset, L, Z, Q, split,
                                 episode_seed_for(seed, e))
        scores = score_episode(net, episode)
        return episode, scores

    accs = np.empty(n_episodes, dtype=np.float64)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, range(n_episodes)))
    else:
        results = (run_one(e) for e in range(n_episodes))

    for e, (episode, scores) in enumerate(results):
        accs[e] = episode_accuracy(scores, episode.query_local)
        if dump is not None:
            dump(e, episode, scores)

    accs *= 100.0
    std = accs.std(ddof=1) if n_episodes > 1 else 0.0
    return EvalReport(acc=float(accs.mean()),
                      ci95=float(1.96 * std / np.sqrt(n_episodes)),
                      per_episode=accs, episodes=n_episodes, way=L, shot=Z)


# -- validation search over the loss weights -------------------------------------


@dataclass
class WeightTrial:
    weights: LossWeights
    val_acc: float


def search_weights(config: TrainConfig, dataset: Dataset, trials: int = 20,
                   seed: int = 0, budget_iterations: int = 500,
                   budget_episodes: int = 200):
    """Random log-uniform search over (alpha, beta, gamma) in [0.001, 1]^3.

    Each trial trains from the same model seed for ``budget_iterations``,
    then scores validation episodes. Returns (best LossWeights, trials).
    """
    if len(dataset.split_records("val")) < config.L:
        raise ConfigError("validation split too small for the configured L")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    out = []
    best = None
    for _ in range(trials):
        a, b, g = 10.0 ** rng.uniform(-3.0, 0.0, size=3)
        w = LossWeights(float(a), float(b), float(g))
        cfg = replace(config, weights=w, iterations=budget_iterations)
        result = train_supervised(cfg, dataset)
        report = evaluate(result.net, dataset, config.L, config.Z, config.Q,
                          budget_episodes, seed=seed, split="val")
        trial = WeightTrial(weights=w, val_acc=report.acc)
        out.append(trial)
        if best is None or trial.val_acc > best.val_acc:
            best = trial
    return best.weights, out
