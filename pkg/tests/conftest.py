import numpy as np
import pytest

from domainrescore.corpus import Split, build_vocabulary, generate_corpus, select, split_corpus
from domainrescore.grammar import default_generator_config
from domainrescore.neural_lm import NlmTrainConfig, train_general


@pytest.fixture(scope="session")
def small_corpus():
    cfg = default_generator_config(seed=7, utterances_per_domain=200, inventory_scale=0.15)
    return split_corpus(generate_corpus(cfg), seed=3)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocabulary(select(small_corpus, Split.TRAIN), 400)


@pytest.fixture(scope="session")
def tiny_nlm(small_corpus, small_vocab):
    """A quickly trained NCE model; good enough to give informative scores."""
    cfg = NlmTrainConfig(learning_rate=0.01, epochs=2, embed_dim=12, hidden=16, nce_samples=10, seed=1)
    model, _ = train_general(select(small_corpus, Split.TRAIN), select(small_corpus, Split.DEV), small_vocab, cfg)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_ngram(small_corpus, small_vocab):
    from domainrescore.ngram_lm import train_kneser_ney

    return train_kneser_ney(select(small_corpus, Split.TRAIN), small_vocab, 3, 0.75)


@pytest.fixture(scope="session")
def small_channel(small_corpus, small_vocab):
    from domainrescore.firstpass_sim import Channel, ChannelConfig, unigram_counts

    return Channel(small_vocab, ChannelConfig(seed=11), unigram_counts(select(small_corpus, Split.TRAIN)))


@pytest.fixture(scope="session")
def sampled_nbests(small_corpus, small_channel, small_ngram):
    from domainrescore.firstpass_sim import simulate_nbest

    return [simulate_nbest(u, small_channel, small_ngram) for u in select(small_corpus, Split.EVAL) + select(small_corpus, Split.DEV)]


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}
ACCEPTANCE_DETAILS: dict[int, list[str]] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
        terminalreporter.section("acceptance details")
        for n in sorted(ACCEPTANCE_DETAILS):
            for line in ACCEPTANCE_DETAILS[n]:
                terminalreporter.write_line(f"  [{n:>2}] {line}")
