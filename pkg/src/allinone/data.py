"""IDX (MNIST) and CIFAR-10 binary ingestion.

Pixels are kept as uint8; :meth:`Dataset.batch` scales them to [0, 1]
float64 on the way out.
"""
import gzip
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, CountMismatchError, IngestionError, LabelRangeError, RecordSizeError,
                     TruncatedFileError)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
NUM_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    pixels: np.ndarray      # (N, C, H, W) uint8
    labels: np.ndarray      # (N,) int64

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise CountMismatchError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= NUM_CLASSES)][0])
            raise LabelRangeError(f"label {bad} outside 0..{NUM_CLASSES - 1}")

    def __len__(self):
        return len(self.labels)

    @property
    def x(self):
        return self.pixels.astype(np.float64) / 255.0

    def batch(self, idx):
        return self.pixels[idx].astype(np.float64) / 255.0, self.labels[idx]

    def subset(self, n):
        if n is None or n >= len(self):
            return self
        return Dataset(self.pixels[:n], self.labels[:n])


def _read(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def ingest_idx(path):
    """Parse one IDX file.

    Image files (magic 0x00000803) come back as (N, 1, H, W) uint8, label
    files (0x00000801) as (N,) int64.
    """
    raw = _read(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than an IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise BadMagicError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected - header, offset=header)
    if magic == IDX_IMAGES:
        return data.reshape(dims[0], 1, dims[1], dims[2])
    return data.astype(np.int64)


def load_mnist(root, split="train"):
    images, labels = MNIST_FILES[split]
    root = Path(root)

    def pick(name):
        plain = root / name
        return plain if plain.exists() or not (root / f"{name}.gz").exists() else root / f"{name}.gz"

    pixels = ingest_idx(pick(images))
    lab = ingest_idx(pick(labels))
    if pixels.ndim != 4:
        raise BadMagicError(f"{images}: not an image file")
    if lab.ndim != 1:
        raise BadMagicError(f"{labels}: not a label file")
    return Dataset(pixels, lab)


def ingest_cifar_binary(paths, per_class=None):
    """CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record).

    ``per_class`` keeps the first k records of each class, in file order.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = _read(p)
        if len(raw) % CIFAR_RECORD:
            raise RecordSizeError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    ds = Dataset(pixels, labels)
    return ds if per_class is None else take_per_class(ds, per_class)


def take_per_class(ds, per_class):
    """First ``per_class`` samples of every class, original order kept."""
    keep = np.sort(np.concatenate([np.flatnonzero(ds.labels == c)[:per_class] for c in range(NUM_CLASSES)]))
    return Dataset(ds.pixels[keep], ds.labels[keep])


def sample_digest(ds, i=0):
    """SHA-256 of one sample's raw pixel bytes."""
    return hashlib.sha256(np.ascontiguousarray(ds.pixels[i]).tobytes()).hexdigest()


def data_root(explicit=None):
    if explicit:
        return Path(explicit)
    env = os.environ.get("ALLINONE_DATA_DIR")
    return Path(env) if env else Path.home() / "data"


def load_dataset(name, root=None, split="train", per_class=None):
    root = data_root(root)
    if name == "mnist":
        ds = load_mnist(root / "mnist", split)
    elif name == "cifar10":
        base = root / "cifar-10-batches-bin"
        files = [base / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else [base / "test_batch.bin"]
        ds = ingest_cifar_binary(files)
    else:
        raise IngestionError(f"unknown dataset {name!r}")
    return ds if per_class is None else take_per_class(ds, per_class)
