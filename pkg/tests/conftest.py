import numpy as np
import pytest

from fimmerge.micromodel import (
    MicroModel,
    MicroModelConfig,
    make_fisher_corpus,
    make_micro_pair,
    train_to_convergence,
)
from fimmerge.topology import parse_topology


@pytest.fixture(scope="session")
def default_model():
    return MicroModel.initialize(MicroModelConfig())


@pytest.fixture(scope="session")
def small_model():
    return MicroModel.initialize(
        MicroModelConfig(vocab_size=16, seq_len=12, n_layers=2, hidden_dim=8,
                         mlp_hidden_dim=16, seed=3)
    )


@pytest.fixture(scope="session")
def micro_pair():
    return make_micro_pair()


@pytest.fixture(scope="session")
def pair_topology(micro_pair):
    return parse_topology(micro_pair.base.to_archive())


@pytest.fixture(scope="session")
def fisher_trained():
    """Model trained near the interior optimum of the collision-rich corpus."""
    corpus = make_fisher_corpus(seed=43)
    model = MicroModel.initialize(MicroModelConfig())
    result = train_to_convergence(model, corpus, steps=4000, lr=0.7)
    return result, corpus


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
