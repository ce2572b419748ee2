"""Model graph: encoder, relation trunk, relative heads, absolute heads.

The class-relation pathway (encoder -> pair concat -> trunk -> two FC
layers -> sigmoid) is the baseline few-shot relation net. The full net
adds per-image absolute heads (class logits and attribute predictions)
and two feedback connections: absolute predictions of both pair members
are tiled into the trunk's last block, and the soft-relation output is
concatenated into the class-relation head's input. Every extra piece is
gated by a descriptor flag so the baseline is exactly recoverable.

Sub-network initialization streams are keyed by (seed, subnet name), so a
full net and a baseline built from the same seed share bit-identical
encoder/trunk/class-head weights regardless of which other heads exist.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ContractError, DescriptorMismatchError, DimensionError,
                     FormatError)
from .layers import BatchNorm2d, Conv2d, Linear

CHECKPOINT_VERSION = 1


@dataclass
class ArchDescriptor:
    """Everything needed to rebuild a net with the same shapes."""

    image_size: int = 32
    in_channels: int = 3
    enc_channels: int = 64
    trunk_channels: int = 64
    class_dim: int = 12            # C_train (supervised) or key width (unsup)
    attr_dim: int = 16             # A (supervised) or key width (unsup)
    rel_hidden: int = 8
    b_dim: int = 1                 # width of the soft-relation output
    absolute_feedback: bool = True
    relative_feedback: bool = True
    feedback_detach: bool = False
    mode: str = "supervised"       # 'supervised' | 'unsupervised'
    precision: str = "f32"         # 'f32' | 'f64'

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised"):
            raise ContractError(f"unknown mode '{self.mode}'")
        if self.precision not in ("f32", "f64"):
            raise ContractError(f"unknown precision '{self.precision}'")
        # encoder pools after all 4 blocks; each needs spatial >= 2
        s = self.image_size
        for blk in range(4):
            if s < 2:
                raise DimensionError(
                    f"image size {self.image_size} exhausts spatial dims at "
                    f"encoder block {blk + 1}")
            s //= 2
        self.enc_spatial = s
        # trunk pools only while spatial > 1, so 4 blocks always fit
        self.trunk_pools = []
        for _ in range(4):
            self.trunk_pools.append(s > 1)
            if s > 1:
                s //= 2
        self.trunk_spatial = s
        self.feedback_channels = 2 * (self.class_dim + self.attr_dim)
        self.trunk_vec = self.trunk_channels * s * s
        self.rc_input = self.trunk_vec + (self.b_dim if self.relative_feedback else 0)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_json(self) -> dict:
        keep = {f.name for f in fields(ArchDescriptor)}
        return {k: v for k, v in asdict(self).items() if k in keep}

    @staticmethod
    def from_json(d: dict) -> "ArchDescriptor":
        keep = {f.name for f in fields(ArchDescriptor)}
        unknown = set(d) - keep
        if unknown:
            raise FormatError(f"unknown descriptor keys: {sorted(unknown)}")
        return ArchDescriptor(**d)


@dataclass
class ForwardBundle:
    """Everything one supervised episode forward produces for the losses."""

    c_rel: Tensor            # (P, 1) pair class-relation predictions
    a_rel: Tensor            # (P, B) pair soft-relation predictions
    class_logits: Tensor     # (N, class_dim) per-image
    attr_pred: Tensor        # (N, attr_dim) per-image, sigmoid bounded
    n_rows: int              # pair grid rows
    n_cols: int              # pair grid cols


@dataclass
class UnsupBundle:
    """One unsupervised pair-group forward: three relation grids + heads."""

    zeta: Tensor             # (M, M) within first source
    zeta_star: Tensor        # (M, M) within second source
    zeta_cross: Tensor       # (M, M) across sources
    a_rel_xx: Tensor         # (M*M, B)
    a_rel_yy: Tensor
    a_rel_xy: Tensor
    class_logits: Tensor     # (2M, class_dim) view order: x views then y views
    attr_pred: Tensor        # (2M, attr_dim)


def subnet_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode("ascii"))]))


class _ConvBlock:
    def __init__(self, in_ch: int, out_ch: int, rng, dtype, pool: bool):
        self.conv = Conv2d(in_ch, out_ch, kernel=3, pad=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.pool = pool

    def __call__(self, x: Tensor, train: bool, update_stats: bool) -> Tensor:
        y = ad.relu(self.bn(self.conv(x), train, update_stats))
        return ad.maxpool2x2(y) if self.pool else y

    def parameters(self, prefix: str):
        return [(f"{prefix}.conv.w", self.conv.w), (f"{prefix}.conv.b", self.conv.b),
                (f"{prefix}.bn.gamma", self.bn.gamma), (f"{prefix}.bn.beta", self.bn.beta)]


def _build_encoder(desc: ArchDescriptor, seed: int):
    rng = subnet_rng(seed, "encoder")
    blocks = []
    in_ch = desc.in_channels
    for _ in range(4):
        blocks.append(_ConvBlock(in_ch, desc.enc_channels, rng, desc.dtype, pool=True))
        in_ch = desc.enc_channels
    return blocks


def _build_trunk(desc: ArchDescriptor, seed: int, with_feedback: bool):
    rng = subnet_rng(seed, "trunk")
    t = desc.trunk_channels
    ins = [2 * desc.enc_channels, t, t,
           t + (desc.feedback_channels if with_feedback else 0)]
    return [_ConvBlock(ins[i], t, rng, desc.dtype, pool=desc.trunk_pools[i])
            for i in range(4)]


class _RelClassHead:
    """Two FC layers with a bounded scalar output."""

    def __init__(self, in_dim: int, hidden: int, rng, dtype):
        self.fc1 = Linear(in_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(x))))

    def parameters(self, prefix: str):
        return [(f"{prefix}.fc1.w", self.fc1.w), (f"{prefix}.fc1.b", self.fc1.b),
                (f"{prefix}.fc2.w", self.fc2.w), (f"{prefix}.fc2.b", self.fc2.b)]


class BaselineNet:
    """Encoder + trunk + class-relation head only: the reference model."""

    def __init__(self, desc: ArchDescriptor, seed: int):
        if desc.absolute_feedback or desc.relative_feedback:
            raise ContractError("baseline net requires both feedback flags off")
        self.desc = desc
        self.encoder = _build_encoder(desc, seed)
        self.trunk = _build_trunk(desc, seed, with_feedback=False)
        self.rc = _RelClassHead(desc.rc_input, desc.rel_hidden,
                                subnet_rng(seed, "rel_class"), desc.dtype)

    def encode(self, x, train: bool, update_stats: bool = True) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.desc.dtype))
        for blk in self.encoder:
            t = blk(t, train, update_stats)
        return t

    def relation_scores(self, feat_a: Tensor, feat_b: Tensor, train: bool,
                        update_stats: bool = True, vec_a: Tensor = None,
                        vec_b: Tensor = None):
        return _pair_forward(self, feat_a, feat_b, vec_a, vec_b, train, update_stats)

    def forward_supervised(self, episode, train: bool, update_stats: bool = True,
                           pair_mode: str = "support_query") -> ForwardBundle:
        """Encode the episode, pool supports per class, score the pair grid.

        ``support_query`` scores the (L, L*Q) prototype-vs-query grid;
        ``all_pairs`` scores every ordered pair over prototypes + queries.
        """
        desc = self.desc
        L, Z, Q = episode.way, episode.shot, episode.queries
        x_all = np.concatenate([episode.support_x, episode.query_x])
        phi = self.encode(x_all, train, update_stats)

        n_sup = L * Z
        k, s = desc.enc_channels, desc.enc_spatial
        phi_sup = ad.gather_rows(phi, np.arange(n_sup))
        phi_qry = ad.gather_rows(phi, np.arange(n_sup, n_sup + L * Q))
        proto = ad.tmean(ad.reshape(phi_sup, (L, Z, k, s, s)), axis=1)

        has_heads = isinstance(self, ArlNet)
        logits = self.class_logits(phi) if has_heads else None
        attrs = self.attr_pred(phi) if has_heads else None

        if pair_mode == "support_query":
            fa, fb = proto, phi_qry
            rows, cols = L, L * Q
        elif pair_mode == "all_pairs":
            fa = ad.concat([proto, phi_qry], axis=0)
            fb = fa
            rows = cols = L + L * Q
        else:
            raise ContractError(f"unknown pair_mode '{pair_mode}'")

        c_rel, a_rel = self.relation_scores(fa, fb, train, update_stats)
        return ForwardBundle(c_rel=c_rel, a_rel=a_rel, class_logits=logits,
                             attr_pred=attrs, n_rows=rows, n_cols=cols)

    def named_parameters(self):
        out = []
        for i, blk in enumerate(self.encoder):
            out.extend(blk.parameters(f"encoder.block{i}"))
        for i, blk in enumerate(self.trunk):
            out.extend(blk.parameters(f"trunk.block{i}"))
        out.extend(self.rc.parameters("rel_class"))
        return out

    def bn_layers(self):
        return ([(f"encoder.block{i}.bn", blk.bn) for i, blk in enumerate(self.encoder)]
                + [(f"trunk.block{i}.bn", blk.bn) for i, blk in enumerate(self.trunk)])


class ArlNet(BaselineNet):
    """Full net: baseline pathway plus absolute heads and feedback wiring."""

    def __init__(self, desc: ArchDescriptor, seed: int):
        self.desc = desc
        self.encoder = _build_encoder(desc, seed)
        self.trunk = _build_trunk(desc, seed, with_feedback=desc.absolute_feedback)
        self.rc = _RelClassHead(desc.rc_input, desc.rel_hidden,
                                subnet_rng(seed, "rel_class"), desc.dtype)
        self.ra = Linear(desc.trunk_vec, desc.b_dim,
                         subnet_rng(seed, "rel_sem"), desc.dtype)
        self.hc = Linear(desc.enc_channels, desc.class_dim,
                         subnet_rng(seed, "abs_class"), desc.dtype)
        self.ha = Linear(desc.enc_channels, desc.attr_dim,
                         subnet_rng(seed, "abs_sem"), desc.dtype)

    # -- per-image absolute heads -----------------------------------------

    def class_logits(self, phi: Tensor) -> Tensor:
        return self.hc(ad.tmean(phi, axis=(2, 3)))

    def attr_pred(self, phi: Tensor) -> Tensor:
        return ad.sigmoid(self.ha(ad.tmean(phi, axis=(2, 3))))

    def feedback_vectors(self, phi: Tensor) -> Tensor:
        """Bounded per-descriptor prediction vector injected by the feedback.

        Class predictions go through softmax in supervised mode (mutually
        exclusive classes) and sigmoid in unsupervised mode (independent
        key bits); attribute predictions are already sigmoid outputs.
        """
        logits = self.class_logits(phi)
        cls = (ad.softmax(logits, axis=1) if self.desc.mode == "supervised"
               else ad.sigmoid(logits))
        return ad.concat([cls, self.attr_pred(phi)], axis=1)

    # -- pairwise relation pathway -----------------------------------------

    def relation_scores(self, feat_a: Tensor, feat_b: Tensor, train: bool,
                        update_stats: bool = True, vec_a: Tensor = None,
                        vec_b: Tensor = None):
        """Score all (a, b) pairs row-major; returns (c_rel (n*m,1), a_rel (n*m,B)).

        Channel order per pair is fixed: the first argument's channels come
        first (support/prototype side), then the second's (query side).
        """
        if self.desc.absolute_feedback and (vec_a is None or vec_b is None):
            vec_a = self.feedback_vectors(feat_a)
            vec_b = self.feedback_vectors(feat_b)
        return _pair_forward(self, feat_a, feat_b, vec_a, vec_b, train, update_stats)

    # -- unsupervised forward ------------------------------------------------

    def forward_unsupervised(self, x_views: np.ndarray, y_views: np.ndarray,
                             train: bool, update_stats: bool = True) -> UnsupBundle:
        desc = self.desc
        m = x_views.shape[0]
        phi = self.encode(np.concatenate([x_views, y_views]).astype(desc.dtype),
                          train, update_stats)
        fx = ad.gather_rows(phi, np.arange(m))
        fy = ad.gather_rows(phi, np.arange(m, 2 * m))
        logits = self.class_logits(phi)
        attrs = self.attr_pred(phi)
        vx = vy = None
        if desc.absolute_feedback:
            v_all = self.feedback_vectors(phi)
            vx = ad.gather_rows(v_all, np.arange(m))
            vy = ad.gather_rows(v_all, np.arange(m, 2 * m))

        cxx, axx = self.relation_scores(fx, fx, train, update_stats, vx, vx)
        cyy, ayy = self.relation_scores(fy, fy, train, update_stats, vy, vy)
        cxy, axy = self.relation_scores(fx, fy, train, update_stats, vx, vy)
        return UnsupBundle(
            zeta=ad.reshape(cxx, (m, m)), zeta_star=ad.reshape(cyy, (m, m)),
            zeta_cross=ad.reshape(cxy, (m, m)),
            a_rel_xx=axx, a_rel_yy=ayy, a_rel_xy=axy,
            class_logits=logits, attr_pred=attrs)

    def named_parameters(self):
        out = BaselineNet.named_parameters(self)
        out.extend([("rel_sem.fc.w", self.ra.w), ("rel_sem.fc.b", self.ra.b),
                    ("abs_class.fc.w", self.hc.w), ("abs_class.fc.b", self.hc.b),
                    ("abs_sem.fc.w", self.ha.w), ("abs_sem.fc.b", self.ha.b)])
        return out


def _pair_forward(net, feat_a: Tensor, feat_b: Tensor, vec_a, vec_b,
                  train: bool, update_stats: bool):
    """Shared trunk+heads pass over the row-major (a, b) pair grid."""
    desc = net.desc
    n, m = feat_a.shape[0], feat_b.shape[0]
    ia = np.repeat(np.arange(n), m)
    ib = np.tile(np.arange(m), n)
    psi = ad.concat([ad.gather_rows(feat_a, ia), ad.gather_rows(feat_b, ib)], axis=1)

    for blk in net.trunk[:3]:
        psi = blk(psi, train, update_stats)

    if desc.absolute_feedback:
        fb = ad.concat([ad.gather_rows(vec_a, ia), ad.gather_rows(vec_b, ib)], axis=1)
        if desc.feedback_detach:
            fb = fb.detach()
        p = n * m
        s3 = psi.shape[2]
        fb_map = ad.broadcast_to(
            ad.reshape(fb, (p, desc.feedback_channels, 1, 1)),
            (p, desc.feedback_channels, s3, psi.shape[3]))
        psi = ad.concat([psi, fb_map], axis=1)

    psi = net.trunk[3](psi, train, update_stats)
    if psi.shape[1:] != (desc.trunk_channels, desc.trunk_spatial, desc.trunk_spatial):
        raise DimensionError(
            f"trunk output shape {psi.shape[1:]} does not match descriptor "
            f"({desc.trunk_channels}, {desc.trunk_spatial}, {desc.trunk_spatial})")
    flat = ad.reshape(psi, (n * m, desc.trunk_vec))

    if not hasattr(net, "ra"):
        return net.rc(flat), None

    a_rel = ad.sigmoid(net.ra(flat))
    if desc.relative_feedback:
        inj = a_rel.detach() if desc.feedback_detach else a_rel
        rc_in = ad.concat([flat, inj], axis=1)
    else:
        rc_in = flat
    return net.rc(rc_in), a_rel


# -- shared state helpers ------------------------------------------------------


def zero_grads(net):
    for _, p in net.named_parameters():
        p.grad = None


def stats_initialized(net) -> bool:
    flags = {bn.state.initialized for _, bn in net.bn_layers()}
    if len(flags) > 1:
        raise ContractError("batch-norm layers disagree on stats initialization")
    return flags.pop()


def init_identity_stats(net):
    """Give every normalization layer identity running statistics.

    Mean 0 / variance 1 turns eval-mode normalization into a pure affine
    map that carries no data-derived information. This is the sanctioned
    way to make a never-trained net evaluable: with fan-in-uniform
    weights the activations contract layer by layer, relation scores sit
    within noise of the zero-logit point, and 5-way accuracy lands at
    chance. Seeding the stats from data instead would hand the random
    net a real normalization scale and with it seed-dependent
    random-feature accuracy far from chance.
    """
    for _, bn in net.bn_layers():
        bn.state.mean[:] = 0.0
        bn.state.var[:] = 1.0
        bn.state.initialized = True


# -- checkpoint format ---------------------------------------------------------


def _buffer_items(net):
    out = []
    for name, bn in net.bn_layers():
        out.append((f"{name}.running_mean", bn))
        out.append((f"{name}.running_var", bn))
    return out


def save_checkpoint(path: str, net, iteration: int):
    """Line 1: JSON header; then raw little-endian f32 arrays in header order."""
    params = net.named_parameters()
    buffers = _buffer_items(net)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "arlnet" if isinstance(net, ArlNet) else "baseline",
        "arch": net.desc.to_json(),
        "iteration": int(iteration),
        "stats_initialized": stats_initialized(net),
        "tensors": [name for name, _ in params],
        "buffers": [name for name, _ in buffers],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for _, p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        for name, bn in buffers:
            arr = bn.state.mean if name.endswith("mean") else bn.state.var
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str):
    """Rebuild the net a checkpoint describes; returns (net, iteration)."""
    with open(path, "rb") as f:
        head_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(head_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint format_version {header.get('format_version')} "
            f"!= {CHECKPOINT_VERSION}")
    desc = ArchDescriptor.from_json(header["arch"])
    net = (ArlNet if header.get("kind") == "arlnet" else BaselineNet)(desc, seed=0)

    params = dict(net.named_parameters())
    if list(params) != header["tensors"]:
        raise DescriptorMismatchError(
            "checkpoint tensor list does not match the rebuilt architecture:\n"
            f"  checkpoint: {header['tensors']}\n  rebuilt:    {list(params)}")
    offset = 0
    for name in header["tensors"]:
        t = params[name]
        n = t.data.size
        if offset + 4 * n > len(blob):
            raise FormatError(f"checkpoint truncated at tensor '{name}'")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        t.data = arr.reshape(t.data.shape).astype(desc.dtype)
        offset += 4 * n
    bns = {name: bn for name, bn in _buffer_items(net)}
    for name in header["buffers"]:
        bn = bns[name]
        n = (bn.state.mean if name.endswith("mean") else bn.state.var).size
        if offset + 4 * n > len(blob):
            raise FormatError(f"checkpoint truncated at buffer '{name}'")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        if name.endswith("mean"):
            bn.state.mean = arr.astype(desc.dtype)
        else:
            bn.state.var = arr.astype(desc.dtype)
        bn.state.initialized = bool(header["stats_initialized"])
        offset += 4 * n
    if offset != len(blob):
        raise FormatError(
            f"checkpoint has {len(blob) - offset} trailing bytes after buffers")
    return net, int(header["iteration"])
