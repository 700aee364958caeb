"""Dataset loading and generation.

Real data arrives in two binary formats: IDX (big-endian magic + dims +
raw ubytes) and CIFAR-style records (1 label byte + 3072 pixel bytes).
Synthetic generators cover 2-D toy problems (blobs, moons) and a
procedural 10-class glyph set rendered at 28x28 that exercises the same
pipelines as handwritten-digit data without shipping any.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH_KINDS = ("blobs", "moons")


class DataFormatError(Exception):
    """Malformed or inconsistent input data files."""


@dataclass
class Dataset:
    x: np.ndarray  # (N, ...) float64 in [0,1]
    y: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.shape[0] != self.y.shape[0]:
            raise DataFormatError(
                f"{self.x.shape[0]} examples but {self.y.shape[0]} labels")

    def __len__(self):
        return self.x.shape[0]


def _read_idx_array(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated before magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} "
            f"(images) or 0x{IDX_LABELS_MAGIC:08x} (labels)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} data bytes for dims {dims}, "
            f"found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return magic, arr


def load_idx(directory):
    """Load the single image/label IDX pair found in ``directory``.

    Images come back as (N, H, W) float64 scaled to [0,1].
    """
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise DataFormatError(f"cannot list {directory}: {exc}") from exc
    images, labels = None, None
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.isfile(path):
            continue
        try:
            magic, arr = _read_idx_array(path)
        except DataFormatError:
            raise
        if magic == IDX_IMAGES_MAGIC:
            if images is not None:
                raise DataFormatError(f"{directory}: multiple image files")
            images = arr
        else:
            if labels is not None:
                raise DataFormatError(f"{directory}: multiple label files")
            labels = arr
    if images is None or labels is None:
        raise DataFormatError(
            f"{directory}: need exactly one image and one label IDX file")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{directory}: {images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(x=images.astype(np.float64) / 255.0,
                   y=labels.astype(np.int64))


def write_idx(directory, images, labels):
    """Write a (N, H, W) uint8 image stack and labels as an IDX pair."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (N, H, W), got {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "images-idx3-ubyte"), "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(os.path.join(directory, "labels-idx1-ubyte"), "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels


def load_cifar_bin(directory, subset_n):
    """First ``subset_n`` records across the sorted .bin files in a directory."""
    if subset_n < 1:
        raise DataFormatError(f"subset size must be >= 1, got {subset_n}")
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(".bin"))
    except OSError as exc:
        raise DataFormatError(f"cannot list {directory}: {exc}") from exc
    if not names:
        raise DataFormatError(f"{directory}: no .bin record files")
    chunks = []
    for name in names:
        path = os.path.join(directory, name)
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES))
    records = np.concatenate(chunks)
    if subset_n > records.shape[0]:
        raise DataFormatError(
            f"{directory}: asked for {subset_n} records, only "
            f"{records.shape[0]} available")
    records = records[:subset_n]
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x=pixels, y=labels)


def _minmax_scale(points):
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    span[span == 0.0] = 1.0
    return (points - lo) / span


def synth_dataset(kind, n, noise=0.05, seed=0):
    """2-class toy data in [0,1]^2: Gaussian blobs or interleaved moons."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected {SYNTH_KINDS}")
    if n < 2:
        raise ValueError(f"need at least 2 examples, got {n}")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    if kind == "blobs":
        c0, c1 = np.array([0.25, 0.25]), np.array([0.75, 0.75])
        pts = np.concatenate([c0 + noise * rng.normal(size=(n0, 2)),
                              c1 + noise * rng.normal(size=(n1, 2))])
    else:
        t0 = rng.uniform(0.0, np.pi, size=n0)
        t1 = rng.uniform(0.0, np.pi, size=n1)
        outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        pts = np.concatenate([outer, inner])
        pts += noise * rng.normal(size=pts.shape)
    labels = np.concatenate([np.zeros(n0, dtype=np.int64),
                             np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x=_minmax_scale(pts)[perm], y=labels[perm])


# Seven-segment layout on a 28x28 canvas: (row range, col range) per segment.
_SEGS = {
    "a": (slice(3, 6), slice(8, 20)),
    "b": (slice(4, 14), slice(18, 21)),
    "c": (slice(14, 24), slice(18, 21)),
    "d": (slice(22, 25), slice(8, 20)),
    "e": (slice(14, 24), slice(7, 10)),
    "f": (slice(4, 14), slice(7, 10)),
    "g": (slice(12, 15), slice(8, 20)),
}

_DIGIT_SEGS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def make_digits(n, seed=0, noise=0.16):
    """Procedural 10-class glyph images: jittered seven-segment digits.

    Each segment gets its own contrast, an occasional segment renders faint
    (a worn display), and the whole image is shifted, brightness-offset, and
    noised. The nuisances overlap the classes enough that small-perturbation
    robustness is not free, while clean images stay mostly separable.
    Returns (images uint8 (n, 28, 28), labels int64). Deterministic per
    seed; class sequence is balanced then shuffled.
    """
    if n < 1:
        raise ValueError(f"need at least 1 example, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 10
    rng.shuffle(labels)
    images = np.zeros((n, 28, 28))
    for i, digit in enumerate(labels):
        glyph = np.zeros((28, 28))
        segs = _DIGIT_SEGS[int(digit)]
        for seg in segs:
            rows, cols = _SEGS[seg]
            glyph[rows, cols] = rng.uniform(0.4, 1.0)
        if rng.uniform() < 0.15:
            rows, cols = _SEGS[segs[int(rng.integers(len(segs)))]]
            glyph[rows, cols] *= rng.uniform(0.15, 0.45)
        dr, dc = rng.integers(-3, 4, size=2)
        glyph = np.roll(np.roll(glyph, dr, axis=0), dc, axis=1)
        glyph += rng.uniform(-0.08, 0.08)
        glyph += noise * rng.normal(size=(28, 28))
        images[i] = glyph
    images = np.clip(images, 0.0, 1.0)
    return np.round(images * 255.0).astype(np.uint8), labels


def ensure_digits_idx(directory, n, seed=0, noise=0.16):
    """Write the procedural glyph set to ``directory`` in IDX form if absent."""
    img_path = os.path.join(directory, "images-idx3-ubyte")
    lab_path = os.path.join(directory, "labels-idx1-ubyte")
    if not (os.path.exists(img_path) and os.path.exists(lab_path)):
        images, labels = make_digits(n, seed=seed, noise=noise)
        write_idx(directory, images, labels)
    return directory


def split(dataset, train_n, val_n, test_n):
    """Carve disjoint train/val/test runs of the stated sizes, in order."""
    need = train_n + val_n + test_n
    if need > len(dataset):
        raise DataFormatError(
            f"split needs {need} examples, dataset has {len(dataset)}")
    if train_n < 1:
        raise DataFormatError(f"train split must be >= 1, got {train_n}")
    a, b = train_n, train_n + val_n
    return (Dataset(dataset.x[:a], dataset.y[:a]),
            Dataset(dataset.x[a:b], dataset.y[a:b]),
            Dataset(dataset.x[b:need], dataset.y[b:need]))
