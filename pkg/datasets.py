"""
Чтение MNIST в формате IDX и подготовка данных для симуляции.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np


logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
UBYTE_CODE = 0x08

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def read_idx(path: str, expected_magic: Optional[int] = None) -> np.ndarray:
    """Массив из IDX-файла (поддерживается .gz)."""
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"Файл IDX обрезан: {path}")
    (magic,) = struct.unpack_from(">I", raw)
    if expected_magic is not None and magic != expected_magic:
        raise ValueError(f"Неверная сигнатура IDX {magic:#010x} в {path}, ожидалась {expected_magic:#010x}")
    if (magic >> 8) & 0xFF != UBYTE_CODE:
        raise ValueError(f"Поддерживаются только IDX с unsigned byte: {path}")
    ndim = magic & 0xFF
    shape = struct.unpack_from(">" + "I" * ndim, raw, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) - offset != count:
        raise ValueError(f"Размер данных IDX не совпадает с заголовком: {path}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(shape)


def _resolve(data_dir: str, name: str) -> str:
    for candidate in (name, name + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(os.path.join(data_dir, name))


def load_split(data_dir: str, split: str, limit: Optional[int] = None) -> Dataset:
    images_name, labels_name = MNIST_FILES[split]
    images = read_idx(_resolve(data_dir, images_name), IMAGES_MAGIC)
    labels = read_idx(_resolve(data_dir, labels_name), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"Число изображений и меток различается в {split}: {images.shape[0]} vs {labels.shape[0]}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images.reshape(images.shape[0], -1).astype(np.float64), labels.astype(np.int64))


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Нормировка по среднему и СКО обучающей выборки."""
    mean = float(train.images.mean())
    std = float(train.images.std()) or 1.0
    return (
        Dataset((train.images - mean) / std, train.labels, train.num_classes),
        Dataset((test.images - mean) / std, test.labels, test.num_classes),
    )


def load_mnist(
    data_dir: str, train_limit: Optional[int] = None, test_limit: Optional[int] = 2000
) -> tuple[Dataset, Dataset]:
    train = load_split(data_dir, "train", train_limit)
    test = load_split(data_dir, "test", test_limit)
    logger.info("[DATA] MNIST loaded from %s: %d train, %d test", data_dir, len(train), len(test))
    return standardize(train, test)


def synthetic_classification(
    n: int, dim: int = 784, num_classes: int = 10, seed: int = 0, spread: float = 1.0
) -> Dataset:
    """Гауссовы облака вокруг случайных центров, замена MNIST в тестах."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, dim, num_classes]))
    centers = rng.standard_normal((num_classes, dim))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = centers[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(images, labels.astype(np.int64), num_classes)
