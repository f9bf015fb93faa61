import gzip
import struct

import numpy as np
import pytest

import datasets


def _idx(path, array, magic_code=0x08, compress=False):
    header = struct.pack(">I", (magic_code << 8) | array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(str(path), "wb") as fh:
        fh.write(payload)


def _write_mnist(directory, n_train=30, n_test=10, compress=False):
    rng = np.random.default_rng(0)
    suffix = ".gz" if compress else ""
    for split, n in (("train", n_train), ("test", n_test)):
        images_name, labels_name = datasets.MNIST_FILES[split]
        _idx(directory / (images_name + suffix), rng.integers(0, 256, size=(n, 28, 28)), compress=compress)
        _idx(directory / (labels_name + suffix), np.arange(n) % 10, compress=compress)


def test_read_idx_roundtrip(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    _idx(tmp_path / "a.idx", data)
    assert np.array_equal(datasets.read_idx(str(tmp_path / "a.idx"), datasets.IMAGES_MAGIC), data)


def test_read_idx_rejects_bad_files(tmp_path):
    _idx(tmp_path / "labels", np.arange(5))
    with pytest.raises(ValueError):
        datasets.read_idx(str(tmp_path / "labels"), datasets.IMAGES_MAGIC)

    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(ValueError):
        datasets.read_idx(str(tmp_path / "short"))

    _idx(tmp_path / "floats", np.arange(4), magic_code=0x0D)
    with pytest.raises(ValueError):
        datasets.read_idx(str(tmp_path / "floats"))

    path = tmp_path / "cut"
    _idx(path, np.arange(10))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        datasets.read_idx(str(path))


@pytest.mark.parametrize("compress", [False, True])
def test_load_mnist(tmp_path, compress):
    _write_mnist(tmp_path, compress=compress)
    train, test = datasets.load_mnist(str(tmp_path), test_limit=5)
    assert train.images.shape == (30, 784)
    assert len(test) == 5
    assert train.labels.dtype == np.int64
    assert abs(float(train.images.mean())) < 1e-9
    assert float(train.images.std()) == pytest.approx(1.0)


def test_missing_mnist_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        datasets.load_mnist(str(tmp_path))


def test_synthetic_classification_is_seeded():
    a = datasets.synthetic_classification(50, dim=6, num_classes=3, seed=4)
    b = datasets.synthetic_classification(50, dim=6, num_classes=3, seed=4)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [17, 17, 16]
    assert a.subset(np.arange(10)).images.shape == (10, 6)
