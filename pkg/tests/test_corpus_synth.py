import math

import numpy as np
import pytest

from damp.corpus_synth import (DESK_PROFILE, BiasProfile, Corpus, TrainConfig, build_vocabulary,
                               cooccurrence_rates, generate_corpus, train_toy_model)
from damp.errors import InvalidInputError
from damp.model_api import ArchConfig


def test_same_seed_same_corpus():
    a = generate_corpus(DESK_PROFILE, 2500, 5)
    b = generate_corpus(DESK_PROFILE, 2500, 5)
    c = generate_corpus(DESK_PROFILE, 2500, 6)
    assert a.sentences == b.sentences
    assert a.sentences != c.sentences


def test_parallel_generation_is_identical():
    assert generate_corpus(DESK_PROFILE, 3500, 2, jobs=3).sentences == generate_corpus(DESK_PROFILE, 3500, 2).sentences


def test_prefix_stability():
    # blocks have their own seeds, so a longer corpus extends a shorter one
    short = generate_corpus(DESK_PROFILE, 2000, 9)
    long = generate_corpus(DESK_PROFILE, 3000, 9)
    assert long.sentences[:2000] == short.sentences


def test_cooccurrence_tracks_profile():
    corpus = generate_corpus(DESK_PROFILE, 40000, 1)
    rates = cooccurrence_rates(corpus)
    for occ, target in DESK_PROFILE.male_rate.items():
        rate, n = rates[occ]
        assert n > 100
        # 5 binomial standard errors
        assert abs(rate - target) <= 5 * math.sqrt(max(target * (1 - target), 0.01) / n), occ


def test_balanced_profile_is_balanced():
    bal = DESK_PROFILE.balanced()
    assert bal.is_balanced and not DESK_PROFILE.is_balanced
    rates = cooccurrence_rates(generate_corpus(bal, 20000, 3))
    pooled_m = sum(r * n for r, n in rates.values())
    pooled_n = sum(n for _, n in rates.values())
    assert abs(pooled_m / pooled_n - 0.5) < 0.02


def test_extreme_rates_are_exact():
    prof = BiasProfile({"doctor": 1.0, "nurse": 0.0})
    rates = cooccurrence_rates(generate_corpus(prof, 3000, 0))
    assert rates["doctor"][0] == 1.0 and rates["nurse"][0] == 0.0


def test_profile_validation_and_yaml(tmp_path):
    with pytest.raises(InvalidInputError):
        BiasProfile({"doctor": 1.5})
    with pytest.raises(InvalidInputError):
        BiasProfile({})
    DESK_PROFILE.save(tmp_path / "p.yaml")
    assert BiasProfile.load(tmp_path / "p.yaml").male_rate == DESK_PROFILE.male_rate


def test_vocabulary_covers_corpus():
    vocab = build_vocabulary(DESK_PROFILE)
    corpus = generate_corpus(DESK_PROFILE, 1000, 0)
    assert all(0 < t < len(vocab) for s in corpus.sentences for t in s)
    # multi-token occupations share their head token
    assert "agent" in vocab and "travel" in vocab and "insurance" in vocab


def test_corpus_roundtrip(tmp_path):
    corpus = generate_corpus(DESK_PROFILE, 300, 0)
    corpus.save(tmp_path / "c.txt")
    back = Corpus.load(tmp_path / "c.txt", corpus.vocab, DESK_PROFILE)
    assert back.sentences == corpus.sentences


def test_bad_sizes():
    with pytest.raises(InvalidInputError):
        generate_corpus(DESK_PROFILE, 0, 0)


def test_training_reduces_loss_and_is_deterministic():
    corpus = generate_corpus(DESK_PROFILE, 1500, 0)
    arch, cfg = ArchConfig(seed=1), TrainConfig(epochs=2, seed=1)
    a = train_toy_model(corpus, arch, cfg)
    b = train_toy_model(corpus, arch, cfg)
    losses = a.metadata["train_loss"]
    assert np.mean(losses[-5:]) < losses[0] - 1.0
    assert losses == b.metadata["train_loss"]


def test_training_rejects_empty_corpus(vocab):
    with pytest.raises(InvalidInputError):
        train_toy_model(Corpus([], DESK_PROFILE, 0, vocab))
