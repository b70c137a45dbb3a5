import numpy as np
import pytest

from mlim.data import generate_corpus, generate_pairs, load_corpus
from mlim.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    # smallest config that still exercises every code path
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16,
                      dropout=0.1, max_text_len=8, image_size=16,
                      enc_channels=(4, 4), dec_channels=(4, 4))
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, np.random.default_rng(7))


@pytest.fixture(scope="session")
def small_corpus_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(24, 99, out)


@pytest.fixture(scope="session")
def small_corpus(small_corpus_manifest):
    return load_corpus(small_corpus_manifest)


@pytest.fixture(scope="session")
def small_pairs():
    return generate_pairs(16, 55)
