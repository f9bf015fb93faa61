import numpy as np
import pytest

from datasets import synthetic_classification
from fl_sim import RoundConfig
from quantizer import CodebookCache


@pytest.fixture
def codebook_cache(tmp_path):
    """Кэш книг во временном каталоге; короткое уточнение упаковки для скорости."""
    return CodebookCache(str(tmp_path / "codebooks"), seed=0, budget=20)


@pytest.fixture
def memory_cache():
    return CodebookCache(None, seed=0, budget=20)


@pytest.fixture
def tiny_data():
    """Маленький разделимый набор вместо MNIST: 20 признаков, 4 класса."""
    full = synthetic_classification(600, dim=20, num_classes=4, seed=1, spread=0.5)
    return full.subset(np.arange(400)), full.subset(np.arange(400, 600))


@pytest.fixture
def tiny_round():
    # N̄ = 20·8 + 8 + 8·4 + 4 = 204, B = 2 → N = 102.
    return RoundConfig(
        K=4,
        T=3,
        E=1,
        batch=10,
        B=2,
        cap=2,
        capacity=0.5,
        samples_per_device=40,
        classes_per_device=2,
        hidden=8,
        fixed_subvector_dim=4,
        seed=3,
    )
