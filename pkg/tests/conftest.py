import numpy as np
import pytest

from ntkprune.data import Batch, load_corpus, write_synthetic_corpus
from ntkprune.model import ModelConfig, init_weights


def tiny_config(n_layers: int = 2) -> ModelConfig:
    return ModelConfig(d=16, m=32, h=4, h_kv=2, n_layers=n_layers, L=16)


def make_batch(samples: np.ndarray, seed: int = 0) -> Batch:
    samples = np.asarray(samples, dtype=np.int32)
    return Batch(samples=samples, seed=seed,
                 source_offsets=np.zeros(samples.shape[0], dtype=np.int64))


def random_batch(rng, n: int = 4, seq_len: int = 12, vocab: int = 258) -> Batch:
    return make_batch(rng.integers(0, vocab, size=(n, seq_len)))


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def weights(cfg):
    return init_weights(cfg, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.txt"
    write_synthetic_corpus(path, n_docs=30, sentences_per_doc=20, seed=7)
    return load_corpus(path)
