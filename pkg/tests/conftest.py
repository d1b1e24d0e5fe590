import numpy as np
import pytest

from conceptnorm.corpus import generate_synthetic, preprocess_foldset
from conceptnorm.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def clean_corpus():
    """20 concepts, 200 noise-free mentions, seed 1, preprocessed."""
    inv, folds = generate_synthetic(20, 200, noise=0, seed=1)
    return inv, preprocess_foldset(folds)


@pytest.fixture(scope="session")
def noisy_corpus():
    inv, folds = generate_synthetic(20, 300, noise=0.3, seed=3)
    return inv, preprocess_foldset(folds)


@pytest.fixture(scope="session")
def trained(noisy_corpus):
    inv, folds = noisy_corpus
    model, report = train(folds[0].train, TrainConfig(max_epochs=60, seed=5), inv)
    return model, report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
