import gzip
import struct

import numpy as np
import pytest

from allinone.data import (CIFAR_RECORD, Dataset, ingest_cifar_binary, ingest_idx, load_dataset, load_mnist,
                           sample_digest, take_per_class)
from allinone.errors import (BadMagicError, CountMismatchError, IngestionError, LabelRangeError, RecordSizeError,
                             TruncatedFileError)

from conftest import requires_mnist

TRAIN0 = "23ceaef5eb61f0e70d64ac18fdf0f60df3d5971cf30bbadac7b6ebf07f782d2c"
TEST0 = "8f6a418c9a639f9e14e96feca47a97df2a35a0a68ae2875431c5c80e05536941"


def _idx_images(pixels):
    n, h, w = pixels.shape
    return struct.pack(">IIII", 0x803, n, h, w) + pixels.astype(np.uint8).tobytes()


def _idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, np.uint8).tobytes()


def _write_mnist(root, n=5, gz=False, labels=None):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (n, 4, 4), dtype=np.uint8)
    lab = np.arange(n) % 10 if labels is None else labels
    for name, blob in (("train-images-idx3-ubyte", _idx_images(pix)), ("train-labels-idx1-ubyte", _idx_labels(lab))):
        if gz:
            (root / f"{name}.gz").write_bytes(gzip.compress(blob))
        else:
            (root / name).write_bytes(blob)
    return pix, lab


@pytest.mark.parametrize("gz", [False, True])
def test_synthetic_idx_round_trip(tmp_path, gz):
    pix, lab = _write_mnist(tmp_path, gz=gz)
    ds = load_mnist(tmp_path, "train")
    assert ds.pixels.shape == (5, 1, 4, 4) and ds.pixels.dtype == np.uint8
    np.testing.assert_array_equal(ds.pixels[:, 0], pix)
    np.testing.assert_array_equal(ds.labels, lab)
    x, y = ds.batch([1, 3])
    assert x.max() <= 1.0 and x.dtype == np.float64 and list(y) == [1, 3]


def test_idx_errors(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        ingest_idx(p)
    p.write_bytes(struct.pack(">II", 0x804, 1))
    with pytest.raises(BadMagicError):
        ingest_idx(p)
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 4, 4) + b"\x00" * 20)
    with pytest.raises(TruncatedFileError):
        ingest_idx(p)
    with pytest.raises(IngestionError):
        ingest_idx(tmp_path / "missing")


def test_swapped_mnist_files_rejected(tmp_path):
    _write_mnist(tmp_path)
    a, b = tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte"
    blob = a.read_bytes()
    a.write_bytes(b.read_bytes())
    b.write_bytes(blob)
    with pytest.raises(BadMagicError):
        load_mnist(tmp_path, "train")


def test_label_and_count_errors(tmp_path):
    _write_mnist(tmp_path, labels=np.array([0, 1, 2, 3, 12]))
    with pytest.raises(LabelRangeError):
        load_mnist(tmp_path)
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((3, 1, 2, 2), np.uint8), np.zeros(2, np.int64))


def _cifar_records(labels, seed=0):
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, (len(labels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    return rec


def test_cifar_ingestion_and_per_class(tmp_path):
    labels = np.array([3, 1, 3, 0, 1, 3, 9])
    rec = _cifar_records(labels)
    (tmp_path / "a.bin").write_bytes(rec[:4].tobytes())
    (tmp_path / "b.bin").write_bytes(rec[4:].tobytes())
    ds = ingest_cifar_binary([tmp_path / "a.bin", tmp_path / "b.bin"])
    assert ds.pixels.shape == (7, 3, 32, 32)
    np.testing.assert_array_equal(ds.pixels[2].ravel(), rec[2, 1:])
    sub = ingest_cifar_binary([tmp_path / "a.bin", tmp_path / "b.bin"], per_class=2)
    assert list(sub.labels) == [3, 1, 3, 0, 1, 9]


def test_cifar_errors(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"\x00" * (CIFAR_RECORD + 1))
    with pytest.raises(RecordSizeError):
        ingest_cifar_binary(tmp_path / "x.bin")
    (tmp_path / "y.bin").write_bytes(_cifar_records([11]).tobytes())
    with pytest.raises(LabelRangeError):
        ingest_cifar_binary(tmp_path / "y.bin")
    with pytest.raises(IngestionError):
        load_dataset("cifar10", root=tmp_path)
    with pytest.raises(IngestionError):
        load_dataset("imagenet", root=tmp_path)


def test_take_per_class_keeps_order():
    labels = np.array([5, 5, 2, 5, 2, 7])
    ds = Dataset(np.arange(6, dtype=np.uint8).reshape(6, 1, 1, 1), labels)
    out = take_per_class(ds, 1)
    assert list(out.pixels.ravel()) == [0, 2, 5]


@requires_mnist
def test_mnist_golden_samples():
    train = load_dataset("mnist", split="train")
    test = load_dataset("mnist", split="test")
    assert len(train) == 60000 and len(test) == 10000
    assert sample_digest(train, 0) == TRAIN0
    assert sample_digest(test, 0) == TEST0
    assert list(train.labels[:10]) == [5, 0, 4, 1, 9, 2, 1, 3, 1, 4]
