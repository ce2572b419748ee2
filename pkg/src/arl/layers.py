"""Parameterized layers: thin containers over autodiff ops.

Each layer owns named parameter tensors and exposes ``parameters()`` as an
ordered (name, Tensor) list; composing modules prefix child names with
dots, so a whole network flattens to a stable, ordered parameter map that
the optimizer and the checkpoint writer share.

Initialization draws from a generator handed in by the caller; layers
never construct their own RNGs, keeping the whole model a pure function
of the seed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int,
                    dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """3x3-style convolution layer with bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, pad: int,
                 rng: np.random.Generator, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(_uniform_fan_in(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=1, pad=self.pad)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


class BatchNorm2d:
    """Per-channel batch norm with running statistics.

    ``train`` picks batch vs running statistics; ``update_stats`` lets a
    train-mode forward leave the running buffers untouched (needed both by
    finite-difference probes and by repeated loss evaluations of the same
    batch).
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(
            mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        return ad.batch_norm2d(x, self.gamma, self.beta, self.state, train,
                               momentum=self.momentum, eps=self.eps,
                               update_stats=update_stats)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class Linear:
    """Affine map on row vectors."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.w = Tensor(_uniform_fan_in(rng, (in_dim, out_dim), in_dim, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.fully_connected(x, self.w, self.b)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


def prefix_params(name: str, module) -> list:
    return [(f"{name}.{k}", v) for k, v in module.parameters()]


def collect_bn(module_lists) -> list:
    """Flatten BatchNorm2d instances out of nested layer lists."""
    found = []
    for item in module_lists:
        if isinstance(item, BatchNorm2d):
            found.append(item)
        elif isinstance(item, (list, tuple)):
            found.extend(collect_bn(item))
    return found
