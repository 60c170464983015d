import numpy as np
import pytest

from t3slab.data import DataConfig, VOCAB, gen_dataset
from t3slab.model import ArchConfig


def tiny_arch(seed: int = 0, **kw) -> ArchConfig:
    base = dict(vocab_size=len(VOCAB), embed_dim=8, num_layers=1, num_heads=2, max_seq_len=40, mlp_ratio=2, seed=seed)
    base.update(kw)
    return ArchConfig(**base)


@pytest.fixture
def arch():
    return tiny_arch()


@pytest.fixture
def small_data():
    return gen_dataset(DataConfig(num_examples=8, chain_length=2, modulus=10, styles=(1,)), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
