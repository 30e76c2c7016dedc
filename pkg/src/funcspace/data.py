"""Datasets: IDX ingestion, synthetic generators, MNIST lookup, seeded streams."""

from __future__ import annotations

import gzip
import importlib.util
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .io import FormatError, atomic_write_bytes
from .nn import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_ENV = "FUNCSPACE_DATA"


class IdxMagicError(FormatError):
    """The IDX magic number is not the one expected for this file kind."""


class IdxTruncatedError(FormatError):
    """The IDX payload is shorter than its header declares."""


class IdxCountMismatchError(FormatError):
    """Image and label files disagree on the number of items."""


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    name: str = ""
    n_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.labels) != len(self.inputs):
            raise ShapeError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not pair up")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ShapeError("labels outside the class range")
        if not np.all(np.isfinite(self.inputs)):
            raise ShapeError("inputs contain non-finite values")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx, split=None, name=None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split, name or self.name, self.n_classes)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.inputs, self.labels)
        return Batch(self.inputs[idx], self.labels[idx])


# seeding -----------------------------------------------------------------------------


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one component (``init``, ``data_order``...).

    Streams are keyed by name, so perturbing one component's draws leaves the
    others untouched.
    """
    key = (zlib.crc32(name.encode()), *[int(e) for e in extra])
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


# IDX ---------------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX blob into an array of its declared shape."""
    if len(raw) < 4:
        raise IdxTruncatedError("file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError("file shorter than the IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise IdxTruncatedError(f"payload has {len(raw) - head} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split="train", name=None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), split, name or Path(images_path).name,
                   n_classes=max(int(labels.max()) + 1, 10) if len(labels) else 10)


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(f">{images.ndim}I", *images.shape) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def write_idx(dataset: Dataset, images_path, labels_path, shape=None) -> None:
    """Write a dataset as IDX, quantizing inputs to ``round(255 * x)``.

    ``shape`` gives the per-image dimensions (default: square if possible,
    else flat).
    """
    n, d = dataset.inputs.shape
    if shape is None:
        side = int(round(np.sqrt(d)))
        shape = (side, side) if side * side == d else (d,)
    if dataset.inputs.min(initial=0) < 0 or dataset.inputs.max(initial=0) > 1:
        raise ShapeError("IDX images need inputs in [0, 1]")
    if len(dataset) and dataset.labels.max() > 255:
        raise ShapeError("IDX labels are unsigned bytes")
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8).reshape(n, *shape)
    atomic_write_bytes(images_path, encode_idx_images(pixels))
    atomic_write_bytes(labels_path, encode_idx_labels(dataset.labels))


# synthetic ---------------------------------------------------------------------------

# Geometry is fixed across seeds; the seed only drives the sampling.
_GEOMETRY_SEED = 20_181_012
BLOB_DIM = 8
BLOB_SIGMA = 0.17  # ~95% linear accuracy with the default 4 classes
GRID_SIDE = 8


def _balanced_labels(n, classes, rng):
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def _blob_centers(classes):
    return np.random.default_rng(_GEOMETRY_SEED).uniform(0.2, 0.8, size=(classes, BLOB_DIM))


def _grid_prototypes(classes):
    rng = np.random.default_rng(_GEOMETRY_SEED + 1)
    yy, xx = np.mgrid[0:GRID_SIDE, 0:GRID_SIDE] / (GRID_SIDE - 1)
    protos = []
    for _ in range(classes):
        img = np.zeros((GRID_SIDE, GRID_SIDE))
        for _ in range(3):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            w = rng.uniform(0.12, 0.3)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        protos.append(img / img.max())
    return np.stack(protos).reshape(classes, -1)


def synth_dataset(kind: str, n: int, classes: int, seed, split="train") -> Dataset:
    """Synthetic classification data with inputs in [0, 1].

    ``blobs``: Gaussian clusters around fixed centers in 8 dimensions.
    ``permutable-grid``: noisy 8x8 images built from fixed per-class
    prototypes, suitable for pixel-permutation tasks.
    """
    if n < classes or classes < 2:
        raise ConfigError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = _balanced_labels(n, classes, rng)
    if kind == "blobs":
        centers = _blob_centers(classes)
        x = centers[labels] + rng.normal(scale=BLOB_SIGMA, size=(n, BLOB_DIM))
    elif kind == "permutable-grid":
        protos = _grid_prototypes(classes)
        gain = rng.uniform(0.6, 1.0, size=(n, 1))
        x = gain * protos[labels] + rng.normal(scale=0.2, size=(n, GRID_SIDE * GRID_SIDE))
    else:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    return Dataset(np.clip(x, 0.0, 1.0), labels, split, f"{kind}", n_classes=classes)


# MNIST -------------------------------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
FALLBACK_TEST = 1000


def _find(root: Path, stem: str):
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = root / cand
        if p.exists():
            return p
    return None


def _bundled_mnist_path():
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        return None
    p = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    return p if p.exists() else None


def mnist_source(root=None) -> str:
    """Describe where MNIST will be read from: ``idx:<dir>``, ``bundled:<file>`` or ``none``."""
    root = root or os.environ.get(DATA_ENV)
    if root:
        r = Path(root)
        if all(_find(r, f) for f in MNIST_FILES["train"]):
            return f"idx:{r}"
    b = _bundled_mnist_path()
    return f"bundled:{b}" if b else "none"


def load_mnist(n_train=None, n_test=None, seed=0, root=None):
    """Train and test MNIST splits, optionally subsampled.

    Real IDX files are read from ``root`` (default ``$FUNCSPACE_DATA``).
    Without them, the 5,000-example MNIST sample shipped with ``mlxtend``
    is used, split 4,000/1,000 with a fixed shuffle. ``n_train``/``n_test``
    draw seeded uniform subsamples; requests beyond what is available are
    truncated.
    """
    src = mnist_source(root)
    if src.startswith("idx:"):
        r = Path(src[4:])
        train = load_idx(*(_find(r, f) for f in MNIST_FILES["train"]), split="train", name="mnist")
        test_files = [_find(r, f) for f in MNIST_FILES["test"]]
        test = load_idx(*test_files, split="test", name="mnist") if all(test_files) else None
        if test is None:
            order = np.random.default_rng(0).permutation(len(train))
            test = train.subset(order[:10_000], split="test")
            train = train.subset(order[10_000:])
    elif src.startswith("bundled:"):
        raw = np.loadtxt(src[len("bundled:"):], delimiter=",")
        inputs, labels = raw[:, :-1] / 255.0, raw[:, -1].astype(np.int64)
        order = np.random.default_rng(0).permutation(len(labels))
        full = Dataset(inputs[order], labels[order], "train", "mnist-5k", n_classes=10)
        test = full.subset(np.arange(FALLBACK_TEST), split="test")
        train = full.subset(np.arange(FALLBACK_TEST, len(full)))
    else:
        raise ConfigError(f"no MNIST data: set ${DATA_ENV} to a directory with the IDX files or install mlxtend")
    rng = np.random.default_rng(seed)
    if n_train is not None and n_train < len(train):
        train = train.subset(np.sort(rng.choice(len(train), n_train, replace=False)))
    if n_test is not None and n_test < len(test):
        test = test.subset(np.sort(rng.choice(len(test), n_test, replace=False)))
    return train, test
