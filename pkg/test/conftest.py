import numpy as np
import pytest

from deepcat.corpus import build_vocab, generate_synthetic_corpus
from deepcat.gradcheck import tiny_model_config
from deepcat.models import GeneratorConfig, SplitConfig, TrainConfig
from deepcat.network import init_params
from deepcat.pipeline import generate_data, load_dataset, train_model

TINY_GENERATOR = GeneratorConfig(num_l1=3, num_leaves=8, vocab_size=80, num_queries=400, seed=3)
TINY_SPLIT = SplitConfig(per_bucket=10, seed=3)
TINY_MODEL = {'embed_dim': 8, 'num_heads': 2, 'head_dim': 4, 'conv_layers': 1}


@pytest.fixture(scope='session')
def tiny_corpus():
    return generate_synthetic_corpus(TINY_GENERATOR)


@pytest.fixture(scope='session')
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('data')
    generate_data(TINY_GENERATOR, TINY_SPLIT, str(out))
    return str(out)


@pytest.fixture(scope='session')
def tiny_dataset(tiny_data_dir):
    return load_dataset(tiny_data_dir)


@pytest.fixture(scope='session')
def tiny_vocab(tiny_dataset):
    return build_vocab(tiny_dataset.train, min_freq=1)


@pytest.fixture(scope='session')
def tiny_train_config():
    return TrainConfig(epochs=2, batch_size=32, learning_rate=0.01, seed=0)


@pytest.fixture(scope='session')
def trained_tiny(tiny_dataset, tiny_train_config):
    """FitResult for a two-epoch run on the tiny corpus."""
    return train_model(tiny_dataset, tiny_train_config, min_freq=1, model_overrides=TINY_MODEL, progress=False)


@pytest.fixture
def tiny_params():
    cfg = tiny_model_config()
    return init_params(cfg, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope='session')
def tiny_model_overrides():
    return dict(TINY_MODEL)
