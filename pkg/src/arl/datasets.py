"""Attributed image data: synthetic generation, disk I/O, episodes, augmentation.

A dataset is a list of per-class records, each holding one attribute vector
shared by all of that class's instances. The synthetic generator renders
classes as unique (shape, color, size, background) tuples, so nearby
classes have overlapping attribute bits and the soft relation labels get a
meaningful geometry. Episode sampling, augmentation, and unsupervised batch
construction are all pure functions of their seeds.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, ContractError, FormatError

# Class factor palettes. A class is one unique combination; the attribute
# vector is the concatenation of the four one-hot blocks (A = 16).
SHAPES = ("disk", "square", "triangle", "ring")
COLORS = (
    (0.85, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.85),
    (0.90, 0.85, 0.15),
    (0.80, 0.20, 0.80),
    (0.15, 0.80, 0.80),
)
SIZES = (0.30, 0.50, 0.72)          # shape radius as a fraction of side/2
BACKGROUNDS = (
    (0.10, 0.10, 0.14),
    (0.45, 0.44, 0.40),
    (0.82, 0.80, 0.76),
)
CLASS_CAPACITY = len(SHAPES) * len(COLORS) * len(SIZES) * len(BACKGROUNDS)
ATTR_DIM = len(SHAPES) + len(COLORS) + len(SIZES) + len(BACKGROUNDS)

VALID_SIDES = (28, 32, 64)
KEY_DIM = 10

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class ClassRecord:
    """One class: a shared attribute vector plus its rendered instances."""

    class_id: int
    attribute: np.ndarray          # (A,) float64 in [0,1]
    images: np.ndarray             # (n, 3, H, W) float32 in [0,1]


@dataclass
class Dataset:
    records: list
    image_size: int
    splits: dict | None = None     # name -> np.ndarray of record indices

    @property
    def attr_dim(self) -> int:
        return self.records[0].attribute.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.records)

    def class_ids(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def instance_offsets(self) -> np.ndarray:
        """Start of each record's block in the flat instance numbering."""
        counts = [len(r.images) for r in self.records]
        return np.concatenate([[0], np.cumsum(counts)])

    def split_records(self, split: str) -> np.ndarray:
        if self.splits is None:
            raise ContractError("dataset has no split assignment; call assign_splits")
        if split not in self.splits:
            raise ConfigError(f"unknown split '{split}', expected one of {SPLIT_NAMES}")
        return self.splits[split]


@dataclass
class Episode:
    """One L-way Z-shot task with class-major support and query blocks."""

    way: int
    shot: int
    queries: int
    support_x: np.ndarray          # (L*Z, 3, H, W)
    support_local: np.ndarray      # (L*Z,) in 0..L-1
    support_attr: np.ndarray       # (L*Z, A)
    query_x: np.ndarray            # (L*Q, 3, H, W)
    query_local: np.ndarray        # (L*Q,) in 0..L-1
    query_attr: np.ndarray         # (L*Q, A)
    class_ids: np.ndarray          # (L,) global class ids
    episode_seed: int

    @property
    def support_global(self) -> np.ndarray:
        return self.class_ids[self.support_local]

    @property
    def query_global(self) -> np.ndarray:
        return self.class_ids[self.query_local]


@dataclass
class TransformParams:
    """Fully sampled augmentation; applying it is a pure function."""

    angle: float                   # degrees in [0, 360)
    hflip: bool
    vflip: bool
    scale: float                   # crop area fraction in [0.6, 1.0]
    ratio: float                   # crop aspect in [0.75, 1.33...]
    top: int
    left: int
    crop_h: int
    crop_w: int
    jitter: float                  # brightness factor in [0.6, 1.4]


@dataclass
class AugmentationKey:
    """10-bit transform code: 4 rotation-quadrant (one-hot), 1 hflip,
    1 vflip, 2 crop-scale bucket, 2 jitter bucket."""

    bits: np.ndarray               # (10,) float64 of 0/1
    source_image_id: int = -1

    def as_string(self) -> str:
        return "".join(str(int(b)) for b in self.bits)


@dataclass
class UnsupPair:
    """Two distinct source instances, each with M augmented views and keys.

    Deliberately carries no class identity: the unsupervised loop can only
    see what this type exposes.
    """

    x_views: np.ndarray            # (M, 3, H, W)
    y_views: np.ndarray
    x_keys: list                   # M AugmentationKey
    y_keys: list


# -- synthetic rendering -----------------------------------------------------


def _render_instance(shape_idx: int, color_idx: int, size_idx: int, bg_idx: int,
                     side: int, rng: np.random.Generator) -> np.ndarray:
    ox, oy = rng.uniform(-0.08, 0.08, size=2) * side
    theta = math.radians(rng.uniform(-20.0, 20.0))
    noise = rng.normal(0.0, 0.02, size=(3, side, side))

    cy = side / 2.0 + oy
    cx = side / 2.0 + ox
    yy, xx = np.meshgrid(np.arange(side, dtype=np.float64),
                         np.arange(side, dtype=np.float64), indexing="ij")
    # shape mask evaluated in a frame rotated by theta around the center
    u = math.cos(theta) * (xx - cx) + math.sin(theta) * (yy - cy)
    v = -math.sin(theta) * (xx - cx) + math.cos(theta) * (yy - cy)
    r = SIZES[size_idx] * side / 2.0

    name = SHAPES[shape_idx]
    if name == "disk":
        mask = u * u + v * v <= r * r
    elif name == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) <= 0.82 * r
    elif name == "triangle":
        ax_, ay_ = 0.0, -r
        bx_, by_ = -0.9 * r, 0.7 * r
        cx_, cy_ = 0.9 * r, 0.7 * r
        s1 = (bx_ - ax_) * (v - ay_) - (by_ - ay_) * (u - ax_)
        s2 = (cx_ - bx_) * (v - by_) - (cy_ - by_) * (u - bx_)
        s3 = (ax_ - cx_) * (v - cy_) - (ay_ - cy_) * (u - cx_)
        mask = ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    else:  # ring
        d2 = u * u + v * v
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)

    img = np.empty((3, side, side), dtype=np.float64)
    img[:] = np.asarray(BACKGROUNDS[bg_idx]).reshape(3, 1, 1)
    color = np.asarray(COLORS[color_idx])
    for ch in range(3):
        img[ch][mask] = color[ch]
    img += noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _one_hot_attribute(shape_idx, color_idx, size_idx, bg_idx) -> np.ndarray:
    a = np.zeros(ATTR_DIM, dtype=np.float64)
    a[shape_idx] = 1.0
    a[len(SHAPES) + color_idx] = 1.0
    a[len(SHAPES) + len(COLORS) + size_idx] = 1.0
    a[len(SHAPES) + len(COLORS) + len(SIZES) + bg_idx] = 1.0
    return a


def generate_synthetic(seed: int, n_classes: int, per_class: int, side: int) -> Dataset:
    """Deterministically render an attributed dataset of simple scenes."""
    if n_classes > CLASS_CAPACITY:
        raise CapacityError(
            f"capacity: n_classes={n_classes} exceeds {CLASS_CAPACITY} unique factor tuples")
    if n_classes < 10:
        raise ConfigError(f"n_classes must be >= 10, got {n_classes}")
    if per_class < 10:
        raise ConfigError(f"per_class must be >= 10, got {per_class}")
    if side not in VALID_SIDES:
        raise ConfigError(f"side must be one of {VALID_SIDES}, got {side}")

    combos = list(itertools.product(range(len(SHAPES)), range(len(COLORS)),
                                    range(len(SIZES)), range(len(BACKGROUNDS))))
    order = np.random.default_rng(np.random.SeedSequence([seed, 0])).permutation(len(combos))
    records = []
    for cid in range(n_classes):
        sh, co, sz, bg = combos[order[cid]]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1 + cid]))
        images = np.stack([_render_instance(sh, co, sz, bg, side, rng)
                           for _ in range(per_class)])
        records.append(ClassRecord(cid, _one_hot_attribute(sh, co, sz, bg), images))
    ds = Dataset(records=records, image_size=side)
    assign_splits(ds, seed)
    return ds


def assign_splits(dataset: Dataset, seed: int,
                  fractions: tuple = (0.6, 0.2, 0.2),
                  counts: tuple | None = None) -> Dataset:
    """Partition classes into disjoint train/val/test sets, in place.

    ``counts`` (n_train, n_val, n_test) overrides the fractional split for
    protocols that need exact class counts.
    """
    c = dataset.n_classes
    if counts is not None:
        n_train, n_val, n_test = counts
        if n_train + n_val + n_test > c:
            raise CapacityError(
                f"capacity: split counts {counts} exceed {c} classes")
    else:
        n_val = int(fractions[1] * c)
        n_test = int(fractions[2] * c)
        n_train = c - n_val - n_test
    perm = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(c)
    dataset.splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:n_train + n_val + n_test]),
    }
    return dataset


# -- disk formats ------------------------------------------------------------


def _write_png(path: str, img01: np.ndarray):
    from PIL import Image

    arr = np.round(img01 * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _read_image(path: str) -> np.ndarray:
    if path.endswith(".ppm"):
        with open(path, "rb") as f:
            data = f.read()
        return _decode_ppm(data, path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _decode_ppm(data: bytes, path: str) -> np.ndarray:
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise FormatError(f"truncated PPM header in {path}")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P6":
        raise FormatError(f"not a P6 PPM file: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval} in {path}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=i + 1)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / 255.0


def save_dataset(dataset: Dataset, out_dir: str) -> str:
    """Write images, the attribute CSV, and the manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    classes = []
    for rec in dataset.records:
        dname = f"class_{rec.class_id:03d}"
        cdir = os.path.join(out_dir, dname)
        os.makedirs(cdir, exist_ok=True)
        for k in range(len(rec.images)):
            _write_png(os.path.join(cdir, f"img_{k:04d}.png"), rec.images[k])
        classes.append({"id": int(rec.class_id), "dir": dname})

    csv_name = "attributes.csv"
    a = dataset.attr_dim
    with open(os.path.join(out_dir, csv_name), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id"] + [f"a_{k}" for k in range(a)])
        for rec in dataset.records:
            writer.writerow([int(rec.class_id)] + [repr(float(v)) for v in rec.attribute])

    manifest = {
        "format_version": 1,
        "classes": classes,
        "attributes_csv": csv_name,
        "image_size": int(dataset.image_size),
    }
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return mpath


def load_manifest(path: str, split_seed: int = 0) -> Dataset:
    """Load a dataset directory; attribute columns are min-max rescaled to [0,1]."""
    mpath = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
    root = os.path.dirname(mpath)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except OSError as e:
        raise FormatError(f"cannot read manifest {mpath}: {e}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest {mpath}: {e}") from None
    for key in ("classes", "attributes_csv", "image_size"):
        if key not in manifest:
            raise FormatError(f"manifest missing required key '{key}'")

    attrs, attr_dim = _read_attribute_csv(os.path.join(root, manifest["attributes_csv"]))
    listed_ids = [int(c["id"]) for c in manifest["classes"]]
    for cid in attrs:
        if cid not in listed_ids:
            raise FormatError(f"attribute row for class {cid} has no class on disk")

    size = int(manifest["image_size"])
    records = []
    for entry in sorted(manifest["classes"], key=lambda c: int(c["id"])):
        cid = int(entry["id"])
        if cid not in attrs:
            raise FormatError(f"attribute-missing(class-id={cid})")
        cdir = os.path.join(root, entry["dir"])
        if not os.path.isdir(cdir):
            raise FormatError(f"class {cid} directory not found: {entry['dir']}")
        names = sorted(n for n in os.listdir(cdir)
                       if n.endswith((".png", ".ppm")))
        if not names:
            raise FormatError(f"class {cid} directory has no images: {entry['dir']}")
        imgs = []
        for n in names:
            img = _read_image(os.path.join(cdir, n))
            if img.shape != (3, size, size):
                raise FormatError(
                    f"image {n} in class {cid} has shape {img.shape[1:]}, "
                    f"manifest says {size}x{size}")
            imgs.append(img)
        records.append(ClassRecord(cid, attrs[cid], np.stack(imgs)))

    _normalize_attr_columns(records)
    ds = Dataset(records=records, image_size=size)
    assign_splits(ds, split_seed)
    return ds


def _read_attribute_csv(path: str):
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise FormatError(f"cannot read attribute CSV {path}: {e}") from None
    if not rows or not rows[0] or rows[0][0] != "class_id":
        raise FormatError(f"attribute CSV {path} must start with 'class_id' header")
    attr_dim = len(rows[0]) - 1
    if attr_dim < 1:
        raise FormatError(f"attribute CSV {path} declares no attribute columns")
    attrs = {}
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != attr_dim + 1:
            raise FormatError(
                f"ragged attribute row at line {ln}: {len(row)} fields, "
                f"expected {attr_dim + 1}")
        try:
            cid = int(row[0])
            vec = np.array([float(v) for v in row[1:]], dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"bad attribute row at line {ln}: {e}") from None
        attrs[cid] = vec
    return attrs, attr_dim


def _normalize_attr_columns(records: list):
    mat = np.stack([r.attribute for r in records])
    lo = mat.min(axis=0)
    hi = mat.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    norm = np.where(span > 0, (mat - lo) / safe, 0.0)
    for r, row in zip(records, norm):
        r.attribute = row


# -- episodic sampling -------------------------------------------------------


def sample_episode(dataset: Dataset, L: int, Z: int, Q: int, split: str,
                   seed) -> Episode:
    """Draw one L-way Z-shot episode from a split; pure in the seed."""
    if L < 1 or Z < 1 or Q < 1:
        raise ConfigError(f"episode shape L={L}, Z={Z}, Q={Q} must be positive")
    pool = dataset.split_records(split)
    if len(pool) < L:
        raise CapacityError(
            f"capacity: split '{split}' has {len(pool)} classes, episode needs L={L}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=L, replace=False)

    sx, sq = [], []
    for k, ridx in enumerate(chosen):
        rec = dataset.records[ridx]
        n = len(rec.images)
        if n < Z + Q:
            raise CapacityError(
                f"capacity: class {rec.class_id} has {n} instances, "
                f"episode needs Z+Q={Z + Q}")
        inst = rng.choice(n, size=Z + Q, replace=False)
        sx.append(rec.images[inst[:Z]])
        sq.append(rec.images[inst[Z:]])

    attrs = np.stack([dataset.records[r].attribute for r in chosen])
    return Episode(
        way=L, shot=Z, queries=Q,
        support_x=np.concatenate(sx),
        support_local=np.repeat(np.arange(L), Z),
        support_attr=np.repeat(attrs, Z, axis=0),
        query_x=np.concatenate(sq),
        query_local=np.repeat(np.arange(L), Q),
        query_attr=np.repeat(attrs, Q, axis=0),
        class_ids=np.array([dataset.records[r].class_id for r in chosen], dtype=np.int64),
        episode_seed=int(seed) if isinstance(seed, (int, np.integer)) else -1,
    )


def episode_seed_for(master_seed: int, iteration: int) -> int:
    """Stable per-iteration episode seed derived from the run seed."""
    return int(np.random.SeedSequence((master_seed, iteration)).generate_state(1)[0])


# -- augmentation ------------------------------------------------------------


def sample_transform(rng: np.random.Generator, h: int, w: int) -> TransformParams:
    angle = float(rng.uniform(0.0, 360.0))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(0.6, 1.0))
    ratio = float(rng.uniform(0.75, 4.0 / 3.0))
    area = scale * h * w
    cw = int(np.clip(round(math.sqrt(area * ratio)), 1, w))
    ch = int(np.clip(round(math.sqrt(area / ratio)), 1, h))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    jitter = float(rng.uniform(0.6, 1.4))
    return TransformParams(angle, hflip, vflip, scale, ratio, top, left, ch, cw, jitter)


def identity_transform(h: int, w: int) -> TransformParams:
    return TransformParams(0.0, False, False, 1.0, 1.0, 0, 0, h, w, 1.0)


def key_bits(params: TransformParams) -> np.ndarray:
    """Encode a transform as the 10-bit key vector.

    Rotation quadrant is one-hot reading right-to-left: 0-90 deg sets the
    last of the four bits, 90-180 the one before it, and so on.
    """
    bits = np.zeros(KEY_DIM, dtype=np.float64)
    quadrant = int(params.angle // 90.0) % 4
    bits[3 - quadrant] = 1.0
    bits[4] = 1.0 if params.hflip else 0.0
    bits[5] = 1.0 if params.vflip else 0.0
    sb = min(3, int((params.scale - 0.6) / 0.1))
    bits[6] = float(sb >> 1)
    bits[7] = float(sb & 1)
    jb = min(3, int((params.jitter - 0.6) / 0.2))
    bits[8] = float(jb >> 1)
    bits[9] = float(jb & 1)
    return bits


def apply_transform(image: np.ndarray, params: TransformParams) -> np.ndarray:
    """Rotate, flip, crop-resize, and brightness-scale one (3,H,W) image.

    Nearest-neighbor resampling with zero fill outside the rotated frame;
    pure in (image, params), so replay is bit-exact.
    """
    c, h, w = image.shape
    out = image
    if params.angle != 0.0:
        theta = math.radians(params.angle)
        ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
        ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        si = np.rint(ci + (ii - ci) * math.cos(theta) + (jj - cj) * math.sin(theta)).astype(np.int64)
        sj = np.rint(cj - (ii - ci) * math.sin(theta) + (jj - cj) * math.cos(theta)).astype(np.int64)
        valid = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
        rot = np.zeros_like(out)
        rot[:, valid] = out[:, si[valid], sj[valid]]
        out = rot
    if params.hflip:
        out = out[:, :, ::-1]
    if params.vflip:
        out = out[:, ::-1, :]
    crop = out[:, params.top:params.top + params.crop_h,
               params.left:params.left + params.crop_w]
    if crop.shape[1:] != (h, w):
        src_i = (np.arange(h, dtype=np.int64) * params.crop_h) // h
        src_j = (np.arange(w, dtype=np.int64) * params.crop_w) // w
        out = crop[:, src_i[:, None], src_j[None, :]]
    else:
        out = crop
    out = np.clip(out * np.float32(params.jitter), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(image: np.ndarray, rng: np.random.Generator,
            source_id: int = -1):
    """Sample one transform, apply it, and return (image', key)."""
    params = sample_transform(rng, image.shape[1], image.shape[2])
    return apply_transform(image, params), AugmentationKey(key_bits(params), source_id)


def sample_unsup_batch(dataset: Dataset, n_pairs: int, M: int,
                       rng: np.random.Generator, split: str = "train") -> list:
    """Draw source pairs and augment each side M times. Labels are never read."""
    if M < 2:
        raise ContractError(f"unsupervised batch needs M >= 2 augmentations, got {M}")
    pool_recs = dataset.split_records(split)
    offsets = dataset.instance_offsets()
    flat = [(int(r), k) for r in pool_recs for k in range(len(dataset.records[r].images))]
    if len(flat) < 2:
        raise CapacityError(
            f"capacity: split '{split}' has {len(flat)} instances, need >= 2")
    pairs = []
    for _ in range(n_pairs):
        ia, ib = rng.choice(len(flat), size=2, replace=False)
        views = []
        keys = []
        for pos in (ia, ib):
            ridx, inst = flat[pos]
            src_id = int(offsets[ridx] + inst)
            image = dataset.records[ridx].images[inst]
            vs, ks = [], []
            for _ in range(M):
                v, k = augment(image, rng, source_id=src_id)
                vs.append(v)
                ks.append(k)
            views.append(np.stack(vs))
            keys.append(ks)
        pairs.append(UnsupPair(x_views=views[0], y_views=views[1],
                               x_keys=keys[0], y_keys=keys[1]))
    return pairs
