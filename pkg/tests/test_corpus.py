import json
from collections import Counter

import numpy as np
import pytest

from domainrescore.corpus import (
    DOMAINS,
    UNK,
    CorpusError,
    Domain,
    GeneratorConfig,
    SlotSpan,
    SlotType,
    Split,
    Utterance,
    build_vocabulary,
    encode,
    generate_corpus,
    read_jsonl,
    split_corpus,
    tokenize,
    write_jsonl,
)
from domainrescore.grammar import default_generator_config


def U(text, domain=Domain.OTHER, slots=(), uid="u"):
    return Utterance(uid, tuple(text.split()), domain, tuple(slots))


def test_tokenize():
    assert tokenize("Play Hello") == ["play", "hello"]
    assert tokenize("") == []
    assert tokenize("   ") == []
    assert tokenize("buy  paper towels.") == ["buy", "paper", "towels"]
    assert tokenize("what's (new)?") == ["what's", "new"]


def test_vocabulary_frequency_cutoff_and_ties():
    corpus = [U("a a a b b c")]
    v = build_vocabulary(corpus, 3)
    assert v.id_to_token == [UNK, "a", "b"]
    assert encode(["c"], v) == [v.unk_id]
    assert build_vocabulary([U("b b a a")], 2).id_to_token == [UNK, "a"]
    v1 = build_vocabulary(corpus, 1)
    assert v1.id_to_token == [UNK]
    assert encode(["a", "b"], v1) == [0, 0]
    with pytest.raises(CorpusError):
        build_vocabulary([], 5)


def test_vocabulary_monotone_in_cap(small_corpus):
    prev = set()
    for cap in (1, 5, 20, 80, 300, 2000):
        cur = set(build_vocabulary(small_corpus, cap).id_to_token)
        assert prev <= cur
        prev = cur


def test_encode_roundtrip(small_vocab):
    toks = small_vocab.id_to_token[1:30]
    assert small_vocab.decode(encode(toks, small_vocab)) == toks
    assert encode([], small_vocab) == []
    assert encode(["play", "zzz-unseen"], small_vocab)[1] == small_vocab.unk_id


def test_vocabulary_invariants(small_vocab):
    ids = [small_vocab.token_to_id[t] for t in small_vocab.id_to_token]
    assert ids == list(range(len(small_vocab)))
    assert UNK in small_vocab
    assert len(set(small_vocab.id_to_token)) == len(small_vocab) <= small_vocab.cap


def _tiny_config(seed=0, zipf=1.0, n=5):
    return GeneratorConfig(
        seed=seed,
        templates={
            "Music": ["play <SongName> by <ArtistName>"],
            "Navigation": ["go to <PlaceName>"],
            "Shopping": ["buy <ItemName>"],
            "Other": ["what time is it"],
        },
        fillers={
            "SongName": ["bohemian rhapsody"],
            "ArtistName": ["queen"],
            "PlaceName": ["moon cafe", "central station"],
            "ItemName": ["paper towels"],
        },
        utterances_per_domain=n,
        zipf_exponent=zipf,
    )


def test_placeholder_expansion():
    music = [u for u in generate_corpus(_tiny_config()) if u.domain is Domain.MUSIC][0]
    assert music.tokens == ("play", "bohemian", "rhapsody", "by", "queen")
    assert music.slots == (SlotSpan(1, 3, SlotType.SONG_NAME), SlotSpan(4, 5, SlotType.ARTIST_NAME))


def test_generator_rejects_bad_configs():
    base = _tiny_config()
    with pytest.raises(CorpusError):
        GeneratorConfig(0, base.templates, base.fillers, 0)
    with pytest.raises(CorpusError):
        GeneratorConfig(0, base.templates, dict(base.fillers, ItemName=[]), 3)
    bad = dict(base.templates, Shopping=["buy <SongName>"])
    with pytest.raises(CorpusError):
        GeneratorConfig(0, bad, base.fillers, 3)


def test_generation_is_deterministic(tmp_path):
    cfg = default_generator_config(seed=3, utterances_per_domain=50, inventory_scale=0.2)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, generate_corpus(cfg))
    write_jsonl(b, generate_corpus(GeneratorConfig.from_json(json.loads(json.dumps(cfg.to_json())))))
    assert a.read_bytes() == b.read_bytes()
    assert [u.tokens for u in read_jsonl(a)] == [u.tokens for u in generate_corpus(cfg)]


def test_uniform_filler_frequencies_chi_square():
    fillers = [f"w{i}" for i in range(10)]
    cfg = GeneratorConfig(
        seed=5,
        templates={d.value: ["say <Word>"] for d in DOMAINS},
        fillers={"Word": fillers},
        utterances_per_domain=2500,
        zipf_exponent=0.0,
    )
    counts = Counter(u.tokens[1] for u in generate_corpus(cfg))
    obs = np.array([counts[f] for f in fillers], dtype=float)
    exp = obs.sum() / len(fillers)
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    # 0.99 quantile of chi-square with 9 degrees of freedom
    assert chi2 < 21.666


def test_generated_spans_valid_and_domain_consistent(small_corpus):
    for u in small_corpus:
        end = 0
        for s in u.slots:
            assert end <= s.start < s.end <= len(u.tokens)
            end = s.end
        assert u.tokens


def test_utterance_rejects_invalid_spans():
    with pytest.raises(CorpusError):
        U("play x", Domain.MUSIC, [SlotSpan(1, 3, SlotType.SONG_NAME)])
    with pytest.raises(CorpusError):
        U("go to x", Domain.MUSIC, [SlotSpan(2, 3, SlotType.PLACE_NAME)])
    with pytest.raises(CorpusError):
        U("a b c", Domain.MUSIC, [SlotSpan(0, 2, SlotType.SONG_NAME), SlotSpan(1, 3, SlotType.SONG_NAME)])
    with pytest.raises(CorpusError):
        Utterance("e", (), Domain.OTHER)


def test_split_ratios_and_partition():
    corpus = [U("x", Domain.MUSIC, uid=f"m{i}") for i in range(100)] + [U("y", Domain.OTHER, uid=f"o{i}") for i in range(50)]
    out = split_corpus(corpus, seed=1)
    c = Counter((u.domain, u.split) for u in out)
    assert (c[Domain.MUSIC, Split.TRAIN], c[Domain.MUSIC, Split.DEV], c[Domain.MUSIC, Split.EVAL]) == (80, 10, 10)
    assert (c[Domain.OTHER, Split.TRAIN], c[Domain.OTHER, Split.DEV], c[Domain.OTHER, Split.EVAL]) == (40, 5, 5)
    assert [u.id for u in out] == [u.id for u in corpus]
    assert all(u.split is not None for u in out)
    assert split_corpus(corpus, seed=1) == out
    assert split_corpus(corpus, seed=2) != out
