import numpy as np
import pytest
import torch

from damp.corpus_synth import DESK_PROFILE, BiasProfile, TrainConfig, build_vocabulary, generate_corpus, train_toy_model
from damp.model_api import ArchConfig, build_toy_model

torch.set_num_threads(1)

# desk-scale training used by the acceptance suite
DESK_CORPUS_SIZE = 30000
DESK_SEED = 0

# same occupations (hence vocabulary) as the desk profile, rates saturated
STRONG_PROFILE = BiasProfile({o: 1.0 if r > 0.5 else 0.0 if r < 0.5 else 0.5
                              for o, r in DESK_PROFILE.male_rate.items()})


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary(DESK_PROFILE)


@pytest.fixture(scope="session")
def untrained(vocab):
    return build_toy_model(vocab, ArchConfig(seed=3))


@pytest.fixture
def fresh_untrained(untrained):
    return untrained.copy()


@pytest.fixture(scope="session")
def quick_model(vocab):
    """Small, briefly trained model with saturated bias (rates pushed to 0 or 1)."""
    corpus = generate_corpus(STRONG_PROFILE, 8000, 11)
    return train_toy_model(corpus, ArchConfig(seed=11), TrainConfig(epochs=3, seed=11))


@pytest.fixture(scope="session")
def desk_pair(vocab):
    """Biased model and its balanced-twin reference at desk scale."""
    biased = train_toy_model(generate_corpus(DESK_PROFILE, DESK_CORPUS_SIZE, DESK_SEED),
                             ArchConfig(seed=DESK_SEED), TrainConfig(seed=DESK_SEED))
    reference = train_toy_model(generate_corpus(DESK_PROFILE.balanced(), DESK_CORPUS_SIZE, DESK_SEED),
                                ArchConfig(seed=DESK_SEED), TrainConfig(seed=DESK_SEED))
    return biased, reference


@pytest.fixture(scope="session")
def heldout_corpus():
    return generate_corpus(DESK_PROFILE.balanced(), 2000, 1234)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
