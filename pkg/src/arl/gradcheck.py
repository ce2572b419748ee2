"""Finite-difference verification of every layer op and the full objective.

Central differences with step h = cbrt(machine eps) * max(1, |x|). A
coordinate passes when |analytic - fd| <= atol + rtol * max(|analytic|, |fd|),
where rtol is the precision-dependent relative tolerance and atol is the
oracle's own noise floor, 50 * eps^(2/3) * max(1, |loss|): below that
magnitude the central difference carries no information, so a pure
relative comparison would reject correct gradients.

A coordinate that fails at the base step is retried with h/8, h/64 and
h/512 (the floor scales with 1/h because roundoff in (f(x+h)-f(x-h))/2h
does). This ejects measure-zero relu/maxpool kinks from the difference
window — the usual false positive of the FD oracle on piecewise-smooth
nets — while a genuinely wrong analytic gradient keeps failing at every
step size.

Ops are always called through the autodiff module object so test fixtures
can inject faulty derivatives and watch the right row fail.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import relabel, training
from .arlnet import ArchDescriptor, ArlNet
from .autodiff import BatchNormState, Tensor
from .datasets import Episode

RTOL = {"f32": 1e-3, "f64": 1e-6}
DTYPE = {"f32": np.float32, "f64": np.float64}


@dataclass
class OpCheck:
    name: str
    max_ratio: float          # worst |an-fd| / (atol + rtol*max(|an|,|fd|))
    max_rel: float            # worst plain relative error
    worst: str                # coordinate label of the worst ratio
    passed: bool


def fd_probe(build, params, precision: str, probe_limit: int | None = None,
             rng: np.random.Generator | None = None):
    """Compare analytic gradients of ``build()`` against central differences.

    ``build`` must be a pure function of the current parameter values,
    returning a scalar Tensor. Probes every coordinate unless
    ``probe_limit`` samples a subset per parameter.
    """
    eps = np.finfo(DTYPE[precision]).eps
    rtol = RTOL[precision]
    hbase = float(eps) ** (1.0 / 3.0)

    loss = build()
    loss_mag = abs(loss.item())
    atol = 50.0 * float(eps) ** (2.0 / 3.0) * max(1.0, loss_mag)
    for _, p in params:
        p.grad = None
    loss = build()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.data)) for name, p in params}

    max_ratio = 0.0
    max_rel = 0.0
    worst = ""
    for name, p in params:
        flat = p.data.reshape(-1)
        g = analytic[name].reshape(-1)
        if probe_limit is not None and flat.size > probe_limit:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=probe_limit, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            x0 = flat[i]
            an = float(g[i])
            ratio = np.inf
            for shrink in (1.0, 8.0, 64.0, 512.0):
                h = hbase * max(1.0, abs(float(x0))) / shrink
                flat[i] = x0 + h
                lp = build().item()
                flat[i] = x0 - h
                lm = build().item()
                flat[i] = x0
                fd = (lp - lm) / (2.0 * h)
                diff = abs(an - fd)
                ratio = diff / (atol * shrink + rtol * max(abs(an), abs(fd)))
                rel = diff / max(abs(an), abs(fd), 1e-300)
                if ratio <= 1.0:
                    break
            if ratio > max_ratio:
                max_ratio = ratio
                worst = f"{name}[{i}]"
            max_rel = max(max_rel, rel)
    return max_ratio, max_rel, worst


# -- per-op cases --------------------------------------------------------------


def _leaf(rng, shape, dtype, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype),
                  requires_grad=True)


def _project(out: Tensor, w: np.ndarray) -> Tensor:
    """Fixed random projection to a scalar so every output entry matters."""
    return ad.tsum(ad.mul(out, w.astype(out.dtype)))


def _case_conv2d(rng, dtype):
    x = _leaf(rng, (2, 3, 6, 6), dtype)
    w = _leaf(rng, (4, 3, 3, 3), dtype, 0.4)
    b = _leaf(rng, (4,), dtype, 0.2)
    proj = rng.normal(size=(2, 4, 6, 6))
    return [("x", x), ("w", w), ("b", b)], \
        lambda: _project(ad.conv2d(x, w, b, stride=1, pad=1), proj)


def _case_batchnorm2d(rng, dtype):
    x = _leaf(rng, (3, 4, 5, 5), dtype)
    gamma = Tensor((1.0 + 0.2 * rng.normal(size=4)).astype(dtype), requires_grad=True)
    beta = _leaf(rng, (4,), dtype, 0.3)
    state = BatchNormState(np.zeros(4, dtype=dtype), np.ones(4, dtype=dtype))
    proj = rng.normal(size=(3, 4, 5, 5))
    return [("x", x), ("gamma", gamma), ("beta", beta)], \
        lambda: _project(ad.batch_norm2d(x, gamma, beta, state, train=True,
                                         update_stats=False), proj)


def _case_relu(rng, dtype):
    # keep values away from the kink so the finite difference is valid
    vals = rng.normal(size=(4, 7))
    vals = np.where(np.abs(vals) < 0.05, 0.3, vals)
    x = Tensor(vals.astype(dtype), requires_grad=True)
    proj = rng.normal(size=(4, 7))
    return [("x", x)], lambda: _project(ad.relu(x), proj)


def _case_maxpool2x2(rng, dtype):
    x = _leaf(rng, (2, 3, 6, 7), dtype)
    proj = rng.normal(size=(2, 3, 3, 3))
    return [("x", x)], lambda: _project(ad.maxpool2x2(x), proj)


def _case_fully_connected(rng, dtype):
    x = _leaf(rng, (5, 6), dtype)
    w = _leaf(rng, (6, 4), dtype, 0.5)
    b = _leaf(rng, (4,), dtype, 0.2)
    proj = rng.normal(size=(5, 4))
    return [("x", x), ("w", w), ("b", b)], \
        lambda: _project(ad.fully_connected(x, w, b), proj)


def _case_sigmoid(rng, dtype):
    x = _leaf(rng, (3, 8), dtype)
    proj = rng.normal(size=(3, 8))
    return [("x", x)], lambda: _project(ad.sigmoid(x), proj)


def _case_softmax(rng, dtype):
    x = _leaf(rng, (4, 6), dtype)
    proj = rng.normal(size=(4, 6))
    return [("x", x)], lambda: _project(ad.softmax(x, axis=1), proj)


def _case_log_softmax(rng, dtype):
    x = _leaf(rng, (4, 6), dtype)
    proj = rng.normal(size=(4, 6))
    return [("x", x)], lambda: _project(ad.log_softmax(x, axis=1), proj)


def _case_concat(rng, dtype):
    a = _leaf(rng, (2, 3, 4, 4), dtype)
    b = _leaf(rng, (2, 5, 4, 4), dtype)
    proj = rng.normal(size=(2, 8, 4, 4))
    return [("a", a), ("b", b)], \
        lambda: _project(ad.concat([a, b], axis=1), proj)


def _case_gather_rows(rng, dtype):
    x = _leaf(rng, (6, 5), dtype)
    idx = rng.integers(0, 6, size=9)
    proj = rng.normal(size=(9, 5))
    return [("x", x)], lambda: _project(ad.gather_rows(x, idx), proj)


def _case_broadcast_to(rng, dtype):
    x = _leaf(rng, (3, 2, 1, 1), dtype)
    proj = rng.normal(size=(3, 2, 4, 4))
    return [("x", x)], lambda: _project(ad.broadcast_to(x, (3, 2, 4, 4)), proj)


def _case_bce_with_logits(rng, dtype):
    x = _leaf(rng, (5, 7), dtype)
    t = rng.integers(0, 2, size=(5, 7)).astype(np.float64)
    return [("x", x)], lambda: ad.bce_with_logits(x, t)


def toy_episode(rng, attr_dim: int = 4, side: int = 16) -> Episode:
    """Random 2-way 1-shot 1-query episode for the full-objective check."""
    attrs = rng.uniform(0.0, 1.0, size=(2, attr_dim))
    return Episode(
        way=2, shot=1, queries=1,
        support_x=rng.uniform(0.0, 1.0, size=(2, 3, side, side)).astype(np.float32),
        support_local=np.array([0, 1]),
        support_attr=attrs.copy(),
        query_x=rng.uniform(0.0, 1.0, size=(2, 3, side, side)).astype(np.float32),
        query_local=np.array([0, 1]),
        query_attr=attrs.copy(),
        class_ids=np.array([0, 1]),
        episode_seed=0,
    )


def build_toy_net(precision: str, seed: int = 0, attr_dim: int = 4):
    desc = ArchDescriptor(image_size=16, enc_channels=8, trunk_channels=8,
                          class_dim=2, attr_dim=attr_dim, rel_hidden=4,
                          absolute_feedback=True, relative_feedback=True,
                          precision=precision)
    return ArlNet(desc, seed=seed)


def _case_full_objective(rng, dtype):
    precision = "f64" if dtype == np.float64 else "f32"
    net = build_toy_net(precision, seed=int(rng.integers(0, 2 ** 31)))
    episode = toy_episode(rng)
    weights = training.LossWeights(0.5, 0.5, 0.5)
    chat, ahat = relabel.episode_pair_targets(episode, p=2.0)
    cls_t, attr_t = relabel.absolute_targets(episode, np.array([0, 1]))

    def build():
        bundle = net.forward_supervised(episode, train=True, update_stats=False)
        return training.combined_objective(
            training.loss_relc(bundle.c_rel, chat.reshape(-1)),
            training.loss_rels(bundle.a_rel, ahat.reshape(-1)),
            training.loss_absc(bundle.class_logits, cls_t),
            training.loss_abss(bundle.attr_pred, attr_t),
            weights)

    return net.named_parameters(), build


OP_REGISTRY = {
    "conv2d": _case_conv2d,
    "batchnorm2d": _case_batchnorm2d,
    "relu": _case_relu,
    "maxpool2x2": _case_maxpool2x2,
    "fully_connected": _case_fully_connected,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "concat": _case_concat,
    "gather_rows": _case_gather_rows,
    "broadcast_to": _case_broadcast_to,
    "bce_with_logits": _case_bce_with_logits,
    "full_objective": _case_full_objective,
}


def check_op(name: str, precision: str = "f64", seed: int = 0,
             probe_limit: int | None = None) -> OpCheck:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    params, build = OP_REGISTRY[name](rng, DTYPE[precision])
    limit = probe_limit
    if name == "full_objective" and limit is None:
        limit = 40 if precision == "f32" else 60
    ratio, rel, worst = fd_probe(build, params, precision, probe_limit=limit,
                                 rng=rng)
    return OpCheck(name=name, max_ratio=ratio, max_rel=rel, worst=worst,
                   passed=ratio <= 1.0)


def run_suite(precision: str = "f64", seed: int = 0,
              ops=None, probe_limit: int | None = None):
    """Check every registered op once; returns (results, all_passed)."""
    names = list(OP_REGISTRY) if ops is None else list(ops)
    results = [check_op(n, precision, seed, probe_limit) for n in names]
    return results, all(r.passed for r in results)


def format_table(results) -> str:
    lines = [f"{'op':18s} {'status':6s} {'err-ratio':>10s} {'rel-err':>10s}  worst"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:18s} {status:6s} {r.max_ratio:10.3e} "
                     f"{r.max_rel:10.3e}  {r.worst}")
    worst = max(results, key=lambda r: r.max_ratio)
    lines.append(f"worst offender: {worst.name} ({worst.worst}), "
                 f"err-ratio {worst.max_ratio:.3e}")
    return "\n".join(lines)
