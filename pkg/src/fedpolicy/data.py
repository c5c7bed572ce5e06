"""Dataset sources: seeded Gaussian blobs, MNIST IDX files, CSV and npz matrices."""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .model import make_rng

IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}

MNIST_FILES = {
    "train_x": "train-images-idx3-ubyte",
    "train_y": "train-labels-idx1-ubyte",
    "test_x": "t10k-images-idx3-ubyte",
    "test_y": "t10k-labels-idx1-ubyte",
}

MNIST_SEARCH = ("data/mnist", "~/data/mnist", "/root/data/mnist", "~/.cache/mnist")


def synthetic_blobs(n_samples: int, n_features: int, n_classes: int, seed: int,
                    spread: float = 1.0, separation: float = 3.0):
    """Isotropic Gaussian clusters, one per class, labels balanced round-robin."""
    rng = make_rng(seed)
    centers = rng.normal(0.0, separation, size=(n_classes, n_features))
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    features = centers[labels] + rng.normal(0.0, spread, size=(n_samples, n_features))
    return features.astype(np.float32), labels.astype(np.int64)


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    dtype = IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise ValueError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header says {shape} but payload has {data.size} elements")
    return data.reshape(shape)


def find_mnist(directory=None) -> Path | None:
    candidates = [directory] if directory else [os.environ.get("FEDPOLICY_MNIST_DIR"), *MNIST_SEARCH]
    for cand in candidates:
        if not cand:
            continue
        p = Path(cand).expanduser()
        if all(_locate(p, name) for name in MNIST_FILES.values()):
            return p
    return None


def _locate(directory: Path, name: str) -> Path | None:
    for suffix in ("", ".gz"):
        p = directory / (name + suffix)
        if p.exists():
            return p
    return None


def load_mnist(directory=None):
    """Return ``(train_x, train_y, test_x, test_y)``; images flattened and scaled to [0, 1]."""
    root = find_mnist(directory)
    if root is None:
        raise FileNotFoundError(
            "MNIST IDX files not found; set FEDPOLICY_MNIST_DIR or place them in data/mnist"
        )
    arrays = {k: read_idx(_locate(root, name)) for k, name in MNIST_FILES.items()}
    out = []
    for split in ("train", "test"):
        x = arrays[f"{split}_x"]
        out.append((x.reshape(len(x), -1) / 255.0).astype(np.float32))
        out.append(arrays[f"{split}_y"].astype(np.int64))
    return tuple(out)


def load_matrix(path, label_column: int = -1):
    """Load ``features, labels`` from a CSV (label in ``label_column``) or an npz archive.

    npz archives must contain ``features`` and ``labels`` arrays.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return z["features"].astype(np.float32), z["labels"].astype(np.int64)
    table = np.loadtxt(path, delimiter=",", ndmin=2)
    labels = table[:, label_column].astype(np.int64)
    features = np.delete(table, label_column % table.shape[1], axis=1)
    return features.astype(np.float32), labels
