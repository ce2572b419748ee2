"""Supervision signals: binary and soft relation labels, absolute targets.

Everything here is a pure float64 function of ids, attribute vectors, or
augmentation keys — no model state. The soft relation label is a radial
basis value exp(-sum_k |a_i[k] - a_j[k]|^p): 1 exactly when the vectors
coincide, decaying smoothly as attribute gaps widen, never reaching 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import AugmentationKey, Episode
from .errors import ContractError, DimensionError


@dataclass
class RelationTarget:
    """Per-pair supervision: hard class match plus soft attribute affinity."""

    c_hat: float
    a_hat: float
    pair: tuple


def binary_label(c_i: int, c_j: int) -> int:
    """1 iff the two class ids are equal."""
    return int(c_i == c_j)


def soft_label(a_i, a_j, p: float) -> float:
    """exp(-sum_k |a_i[k] - a_j[k]|^p), computed in float64."""
    if p <= 0:
        raise ContractError(f"soft_label needs p > 0, got {p}")
    ai = np.asarray(a_i, dtype=np.float64)
    aj = np.asarray(a_j, dtype=np.float64)
    if ai.shape != aj.shape:
        raise DimensionError(
            f"soft_label: attribute shapes differ, {ai.shape} vs {aj.shape}")
    return float(np.exp(-np.sum(np.abs(ai - aj) ** p)))


def pair_matrices(classes_a, attrs_a, classes_b, attrs_b, p: float):
    """Dense (n, m) target matrices for the cross product of two item lists.

    Returns (c_hat, a_hat): c_hat[i, j] = 1 iff classes match; a_hat[i, j]
    is the soft label of the attribute pair.
    """
    if p <= 0:
        raise ContractError(f"pair_matrices needs p > 0, got {p}")
    ca = np.asarray(classes_a, dtype=np.int64)
    cb = np.asarray(classes_b, dtype=np.int64)
    aa = np.asarray(attrs_a, dtype=np.float64)
    ab = np.asarray(attrs_b, dtype=np.float64)
    if aa.shape[0] != ca.shape[0] or ab.shape[0] != cb.shape[0]:
        raise DimensionError("pair_matrices: class/attribute counts disagree")
    if aa.shape[1] != ab.shape[1]:
        raise DimensionError(
            f"pair_matrices: attribute dims differ, {aa.shape[1]} vs {ab.shape[1]}")
    c_hat = (ca[:, None] == cb[None, :]).astype(np.float64)
    dist = np.sum(np.abs(aa[:, None, :] - ab[None, :, :]) ** p, axis=2)
    return c_hat, np.exp(-dist)


def episode_pair_targets(episode: Episode, p: float, pair_mode: str = "support_query"):
    """Relation targets for the pairs the trainer scores.

    ``support_query``: one row per episode class (supports are pooled per
    class), one column per query — an (L, L*Q) grid. ``all_pairs`` appends
    the class prototypes to the item list and scores the full
    (L + L*Q) x (L + L*Q) grid.
    """
    proto_classes = np.arange(episode.way, dtype=np.int64)
    proto_attrs = np.stack(
        [episode.support_attr[k * episode.shot] for k in range(episode.way)])
    if pair_mode == "support_query":
        return pair_matrices(proto_classes, proto_attrs,
                             episode.query_local, episode.query_attr, p)
    if pair_mode == "all_pairs":
        cls = np.concatenate([proto_classes, episode.query_local])
        att = np.concatenate([proto_attrs, episode.query_attr])
        return pair_matrices(cls, att, cls, att, p)
    raise ContractError(f"unknown pair_mode '{pair_mode}'")


def absolute_targets(episode: Episode, train_class_ids):
    """Per-image targets for the absolute heads, support block then query block.

    Class targets index into the training vocabulary (positions within
    ``train_class_ids``), not episode-local slots.
    """
    vocab = np.asarray(train_class_ids, dtype=np.int64)
    lookup = {int(c): k for k, c in enumerate(vocab)}
    globals_ = np.concatenate([episode.support_global, episode.query_global])
    targets = np.empty(globals_.shape[0], dtype=np.int64)
    for n, cid in enumerate(globals_):
        if int(cid) not in lookup:
            raise ContractError(
                f"class {int(cid)} outside training vocabulary of size {len(vocab)}")
        targets[n] = lookup[int(cid)]
    attr_targets = np.concatenate([episode.support_attr, episode.query_attr])
    return targets, attr_targets


def key_matrix(keys) -> np.ndarray:
    """Stack key bit vectors into an (n, 10) float64 matrix."""
    return np.stack([k.bits for k in keys]).astype(np.float64)


def unsup_targets(key_i: AugmentationKey, key_j: AugmentationKey, p: float):
    """Relation target for one augmented pair plus each side's absolute target.

    Same source image means a positive class relation; the soft relation
    treats the 10 key bits as the attribute vectors. The absolute target of
    a sample is its own key bits.
    """
    c_hat = binary_label(key_i.source_image_id, key_j.source_image_id)
    a_hat = soft_label(key_i.bits, key_j.bits, p)
    rel = RelationTarget(float(c_hat), a_hat,
                         (key_i.source_image_id, key_j.source_image_id))
    return rel, key_i.bits.copy(), key_j.bits.copy()


def unsup_pair_matrices(keys_a, keys_b, p: float):
    """Dense targets for two key lists: same-source c_hat, key-bit a_hat."""
    src_a = np.array([k.source_image_id for k in keys_a], dtype=np.int64)
    src_b = np.array([k.source_image_id for k in keys_b], dtype=np.int64)
    return pair_matrices(src_a, key_matrix(keys_a), src_b, key_matrix(keys_b), p)
