"""Dataset ingestion: CIFAR-10 binary batches, MNIST IDX files, synthetic image sets.

Pixel values are scaled to [0, 1] on load. :func:`finalize` then splits off a
validation set and standardizes every split with per-channel statistics of
the training split.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import make_rng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Train/validation/test splits of (n, c, h, w) images with integer labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    name: str = ""

    @property
    def image_shape(self) -> tuple:
        return self.x_train.shape[1:]


# --- CIFAR-10 ---------------------------------------------------------------

def read_cifar10_batch(path: str) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch: records of 1 label byte + 3072 bytes (R, G, B planes of 32x32)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataFormatError(f"{path}: record {bad} has label byte {labels[bad]} >= 10")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return x, labels


def load_cifar10(path: str, seed: int = 0, val_fraction: float = 0.2, classes=None,
                 n_train: int | None = None, n_test: int | None = None) -> Dataset:
    """CIFAR-10 from the directory holding ``data_batch_{1..5}.bin`` and ``test_batch.bin``.

    ``classes`` keeps only the listed classes (relabelled 0..k-1 in that order);
    ``n_train``/``n_test`` subsample deterministically under ``seed``.
    """
    parts = [read_cifar10_batch(os.path.join(path, f)) for f in CIFAR_TRAIN_FILES
             if os.path.exists(os.path.join(path, f))]
    if not parts:
        raise FileNotFoundError(f"no CIFAR-10 training batches found in {path}")
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    xt, yt = read_cifar10_batch(os.path.join(path, CIFAR_TEST_FILE))
    n_classes = 10
    if classes is not None:
        classes = list(classes)
        x, y = _select_classes(x, y, classes)
        xt, yt = _select_classes(xt, yt, classes)
        n_classes = len(classes)
    rng = make_rng(seed)
    if n_train is not None:
        x, y = _subsample(x, y, n_train, rng)
    if n_test is not None:
        xt, yt = _subsample(xt, yt, n_test, rng)
    return finalize(x, y, xt, yt, n_classes, rng, val_fraction, name="cifar10")


def _select_classes(x, y, classes):
    keep = np.isin(y, classes)
    remap = {c: i for i, c in enumerate(classes)}
    return x[keep], np.array([remap[int(v)] for v in y[keep]], dtype=np.int64)


def _subsample(x, y, n, rng):
    if n > len(y):
        raise ValueError(f"asked for {n} examples, only {len(y)} available")
    idx = np.sort(rng.permutation(len(y))[:n])
    return x[idx], y[idx]


# --- MNIST IDX ---------------------------------------------------------------

def _read_idx(path: str, magic: int) -> tuple[tuple, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise DataFormatError(f"{path}: truncated header at offset 0")
        (got,) = struct.unpack(">I", head)
        if got != magic:
            raise DataFormatError(f"{path}: bad magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        body = np.frombuffer(fh.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if body.size != expected:
        raise DataFormatError(f"{path}: payload has {body.size} bytes at offset {4 + 4 * ndim}, "
                              f"header promises {expected}")
    return dims, body


def read_idx_images(path: str) -> np.ndarray:
    dims, body = _read_idx(path, IDX_IMAGES_MAGIC)
    return body.reshape(dims[0], 1, dims[1], dims[2]).astype(np.float64) / 255.0


def read_idx_labels(path: str) -> np.ndarray:
    _, body = _read_idx(path, IDX_LABELS_MAGIC)
    return body.astype(np.int64)


def load_mnist_idx(path: str, seed: int = 0, val_fraction: float = 0.2,
                   n_train: int | None = None, n_test: int | None = None) -> Dataset:
    """MNIST from a directory with the four standard ``*-ubyte`` files."""
    names = {
        "xtr": "train-images-idx3-ubyte", "ytr": "train-labels-idx1-ubyte",
        "xte": "t10k-images-idx3-ubyte", "yte": "t10k-labels-idx1-ubyte",
    }
    f = {k: os.path.join(path, v) for k, v in names.items()}
    x, y = read_idx_images(f["xtr"]), read_idx_labels(f["ytr"])
    xt, yt = read_idx_images(f["xte"]), read_idx_labels(f["yte"])
    for a, b, what in ((x, y, "train"), (xt, yt, "test")):
        if a.shape[0] != b.shape[0]:
            raise DataFormatError(f"{what}: {a.shape[0]} images but {b.shape[0]} labels")
    rng = make_rng(seed)
    if n_train is not None:
        x, y = _subsample(x, y, n_train, rng)
    if n_test is not None:
        xt, yt = _subsample(xt, yt, n_test, rng)
    return finalize(x, y, xt, yt, 10, rng, val_fraction, name="mnist")


# --- synthetic ---------------------------------------------------------------

def synth_images(kind: str, n: int, seed: int, size: int = 8, channels: int = 3,
                 n_classes: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Small image-shaped classification problems with known structure.

    * ``blobs``: each class is a fixed random pattern plus small noise
      (linearly separable for far-apart patterns);
    * ``xor``: sign of the top half times sign of the bottom half;
    * ``rings``: bright ring at one of two radii.
    """
    if kind not in ("blobs", "xor", "rings"):
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    m = n_classes if kind == "blobs" else 2
    if n < 2 * m:
        raise ValueError(f"need at least 2 examples per class, got n={n} for {m} classes")
    rng = make_rng(seed)
    labels = rng.permutation(np.arange(n) % m)
    shape = (channels, size, size)
    if kind == "blobs":
        centers = rng.standard_normal((m,) + shape) * 2.0
        x = centers[labels] + 0.5 * rng.standard_normal((n,) + shape)
    elif kind == "xor":
        a = rng.choice([-1.0, 1.0], size=n)
        b = np.where(labels == 1, a, -a)
        x = 0.3 * rng.standard_normal((n,) + shape)
        x[:, :, : size // 2] += a[:, None, None, None]
        x[:, :, size // 2:] += b[:, None, None, None]
    else:
        yy, xx = np.mgrid[:size, :size] + 0.5 - size / 2
        r = np.sqrt(yy**2 + xx**2)
        radii = np.array([size * 0.15, size * 0.38])
        rings = np.exp(-((r[None] - radii[:, None, None]) ** 2) / 0.5)
        x = rings[labels][:, None] * (1.0 + 0.2 * rng.standard_normal((n, channels, 1, 1)))
        x = x + 0.1 * rng.standard_normal((n,) + shape)
    return x, labels.astype(np.int64)


def synth_dataset(kind: str, n: int, seed: int, size: int = 8, channels: int = 3,
                  n_classes: int = 2, n_test: int | None = None, val_fraction: float = 0.2) -> Dataset:
    n_test = n // 4 if n_test is None else n_test
    x, y = synth_images(kind, n + n_test, seed, size, channels, n_classes)
    rng = make_rng(seed + 1)
    m = int(y.max()) + 1
    return finalize(x[:n], y[:n], x[n:], y[n:], m, rng, val_fraction, name=f"synth-{kind}")


# --- splitting / normalization ---------------------------------------------

def split_train_val(n: int, rng: np.random.Generator, val_fraction: float):
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def finalize(x, y, xt, yt, n_classes, rng, val_fraction=0.2, name="") -> Dataset:
    """Random train/val split, then per-channel standardization from the train split."""
    tr, va = split_train_val(len(y), rng, val_fraction)
    mean = x[tr].mean(axis=(0, 2, 3))
    std = x[tr].std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)

    def norm(a):
        return (a - mean[None, :, None, None]) / std[None, :, None, None]

    return Dataset(norm(x[tr]), y[tr], norm(x[va]), y[va], norm(xt), yt, n_classes, mean, std, name)
