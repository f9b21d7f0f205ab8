import struct

import numpy as np
import pytest

from pdecnn import data as D


def _cifar_file(path, labels, seed=0):
    r = np.random.default_rng(seed)
    recs = []
    for lab in labels:
        recs.append(bytes([lab]) + r.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    path.write_bytes(b"".join(recs))
    return b"".join(recs)


def test_cifar_layout(tmp_path):
    raw = _cifar_file(tmp_path / "b.bin", [3, 7, 0])
    x, y = D.read_cifar10_batch(str(tmp_path / "b.bin"))
    assert len(y) == len(raw) // D.CIFAR_RECORD == 3
    assert y[0] == raw[0] and list(y) == [3, 7, 0]
    assert x[0, 0, 0, 0] == raw[1] / 255
    assert x[1, 2, 31, 31] == raw[3073 + 3072] / 255


def test_cifar_errors(tmp_path):
    raw = _cifar_file(tmp_path / "b.bin", [1, 2])
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(D.DataFormatError, match="multiple"):
        D.read_cifar10_batch(str(tmp_path / "t.bin"))
    (tmp_path / "l.bin").write_bytes(bytes([12]) + raw[1:])
    with pytest.raises(D.DataFormatError, match="label byte 12"):
        D.read_cifar10_batch(str(tmp_path / "l.bin"))


def test_cifar_directory_subset(tmp_path):
    _cifar_file(tmp_path / "data_batch_1.bin", [0, 1, 2, 3] * 10, 1)
    _cifar_file(tmp_path / "test_batch.bin", [0, 1, 5] * 4, 2)
    ds = D.load_cifar10(str(tmp_path), seed=0, classes=[1, 0], n_train=15)
    assert len(ds.y_train) + len(ds.y_val) == 15 and set(ds.y_train) <= {0, 1}
    assert len(ds.y_test) == 8 and ds.n_classes == 2
    assert np.allclose(ds.x_train.mean(axis=(0, 2, 3)), 0, atol=1e-12)


def _idx(path, magic, dims, body):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(body))


def test_idx_reading(tmp_path):
    r = np.random.default_rng(0)
    img = r.integers(0, 256, 3 * 4 * 5, dtype=np.uint8)
    _idx(tmp_path / "i", 0x803, (3, 4, 5), img)
    _idx(tmp_path / "l", 0x801, (3,), [4, 0, 9])
    x = D.read_idx_images(str(tmp_path / "i"))
    y = D.read_idx_labels(str(tmp_path / "l"))
    assert x.shape == (3, 1, 4, 5) and len(x) == len(y)
    assert np.isclose(x[0].sum() * 255, int(img[:20].astype(int).sum()))
    with pytest.raises(D.DataFormatError, match="offset 0"):
        D.read_idx_labels(str(tmp_path / "i"))
    _idx(tmp_path / "short", 0x803, (3, 4, 5), img[:-1])
    with pytest.raises(D.DataFormatError, match="offset 16"):
        D.read_idx_images(str(tmp_path / "short"))


def test_mnist_count_mismatch(tmp_path):
    _idx(tmp_path / "train-images-idx3-ubyte", 0x803, (2, 2, 2), [0] * 8)
    _idx(tmp_path / "train-labels-idx1-ubyte", 0x801, (3,), [0, 1, 2])
    _idx(tmp_path / "t10k-images-idx3-ubyte", 0x803, (1, 2, 2), [0] * 4)
    _idx(tmp_path / "t10k-labels-idx1-ubyte", 0x801, (1,), [0])
    with pytest.raises(D.DataFormatError, match="2 images but 3 labels"):
        D.load_mnist_idx(str(tmp_path))


def _separable(x, y):
    # perceptron on flattened pixels converges iff the classes are linearly separable (bounded run)
    a = np.hstack([x.reshape(len(x), -1), np.ones((len(x), 1))])
    s = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(a.shape[1])
    for _ in range(1000):
        bad = np.where(s * (a @ w) <= 0)[0]
        if not len(bad):
            return True
        w += s[bad[0]] * a[bad[0]]
    return False


def test_synthetic_examples():
    x, y = D.synth_images("blobs", 101, seed=3)
    assert _separable(x, y)
    x2, y2 = D.synth_images("blobs", 101, seed=3)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    for kind in ("blobs", "xor", "rings"):
        _, y = D.synth_images(kind, 51, seed=1)
        counts = np.bincount(y)
        assert counts.max() - counts.min() <= 1
    _, y = D.synth_images("blobs", 40, seed=0, n_classes=4)
    assert set(np.bincount(y)) == {10}
    with pytest.raises(ValueError):
        D.synth_images("moons", 10, 0)


def test_synth_dataset_splits():
    ds = D.synth_dataset("xor", 100, seed=0)
    assert len(ds.y_train) == 80 and len(ds.y_val) == 20 and len(ds.y_test) == 25
    assert ds.image_shape == (3, 8, 8)
