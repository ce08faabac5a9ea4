import random

import pytest

from domainrescore.corpus import SlotSpan, SlotType
from domainrescore.metrics import (
    Op,
    WerBreakdown,
    align,
    corpus_wer,
    oracle_wer,
    relative_delta,
    slot_wer,
    utterance_slot_wer,
    utterance_wer,
)

from helpers import brute_force_distance, random_pair


def test_alignment_cost_equals_brute_force_on_1000_pairs():
    rng = random.Random(0)
    for _ in range(1000):
        a, b = random_pair(rng)
        assert align(a, b).cost == brute_force_distance(a, b, range(3)), (a, b)


def test_alignment_replay_on_10000_pairs():
    rng = random.Random(1)
    for _ in range(10000):
        a, b = random_pair(rng, max_len=8, alphabet=4)
        al = align(a, b)
        assert al.replay(a, b) == b


def test_cost_symmetric():
    rng = random.Random(2)
    for _ in range(500):
        a, b = random_pair(rng)
        assert align(a, b).cost == align(b, a).cost


def test_identity_and_empty():
    ref = "play the song".split()
    assert all(e.op is Op.MATCH for e in align(ref, ref).edits)
    assert utterance_wer(ref, ref).wer == 0
    assert utterance_wer(ref, []).wer == 1.0
    assert utterance_wer(ref, []).deletions == 3


def test_single_deletion():
    b = utterance_wer("play the song".split(), "play song".split())
    assert (b.substitutions, b.deletions, b.insertions) == (0, 1, 0)
    assert b.wer == pytest.approx(1 / 3)


def test_backtrace_prefers_substitution_over_delete_insert():
    al = align(["a", "b"], ["a", "c"])
    assert [e.op for e in al.edits] == [Op.MATCH, Op.SUB]


def test_corpus_wer_pools_counts():
    pairs = [(["a", "b"], ["a", "b"]), (["c", "d"], ["c", "x"])]
    assert corpus_wer(pairs).wer == pytest.approx(0.25)
    assert corpus_wer(list(reversed(pairs))) == corpus_wer(pairs)
    with pytest.raises(ValueError):
        corpus_wer([])


SONG = (SlotSpan(1, 3, SlotType.SONG_NAME),)


def test_slot_wer_hand_substitution():
    ref = ["play", "bohemian", "rhapsody"]
    hyp = ["play", "bohemian", "girl"]
    s = utterance_slot_wer(ref, hyp, SONG)
    assert (s.substitutions, s.ref_tokens) == (1, 2)
    assert s.wer == pytest.approx(0.5)
    assert utterance_wer(ref, hyp).wer == pytest.approx(1 / 3)


def test_slot_wer_perfect_and_unslotted():
    ref = ["play", "bohemian", "rhapsody"]
    assert utterance_slot_wer(ref, ref, SONG).errors == 0
    assert utterance_slot_wer(ref, ["stop"], ()) == WerBreakdown(0, 0, 0, 0)
    total = slot_wer([(ref, ["play", "bohemian", "girl"], SONG), (["stop"], ["go"], ())])
    assert (total.errors, total.ref_tokens) == (1, 2)


def test_slot_wer_deletion_inside_span():
    s = utterance_slot_wer(["play", "bohemian", "rhapsody", "now"], ["play", "rhapsody", "now"], SONG)
    assert (s.deletions, s.substitutions, s.insertions) == (1, 0, 0)


def test_slot_wer_insertion_strictly_inside_span():
    ref = ["play", "bohemian", "rhapsody", "now"]
    inside = utterance_slot_wer(ref, ["play", "bohemian", "x", "rhapsody", "now"], SONG)
    assert inside.insertions == 1
    boundary = utterance_slot_wer(ref, ["play", "x", "bohemian", "rhapsody", "now"], SONG)
    assert boundary.errors == 0
    after = utterance_slot_wer(ref, ["play", "bohemian", "rhapsody", "x", "now"], SONG)
    assert after.errors == 0


def test_slot_errors_never_exceed_full_errors():
    rng = random.Random(4)
    for _ in range(2000):
        ref = [rng.randrange(4) for _ in range(rng.randint(1, 7))]
        hyp = [rng.randrange(4) for _ in range(rng.randint(0, 7))]
        a = rng.randrange(len(ref))
        b = rng.randint(a + 1, len(ref))
        s = utterance_slot_wer(ref, hyp, (SlotSpan(a, b, SlotType.ITEM_NAME),))
        assert 0 <= s.errors <= utterance_wer(ref, hyp).errors


def test_oracle_contains_reference():
    ref = ["a", "b", "c"]
    assert oracle_wer([(ref, [["a"], ref, ["x", "y"]])]).errors == 0


def test_oracle_monotone_in_n_on_sampled_nbests(sampled_nbests):
    assert len(sampled_nbests) >= 100
    for nb in sampled_nbests[:100]:
        hyps = [h.tokens for h in nb.hyps]
        prev = None
        for n in range(1, len(hyps) + 1):
            e = oracle_wer([(nb.ref, hyps[:n])]).errors
            assert prev is None or e <= prev
            prev = e


def test_relative_delta():
    assert relative_delta(0.096, 0.100) == pytest.approx(-4.0)
    assert relative_delta(0.1, 0.1) == 0.0
    with pytest.raises(ZeroDivisionError):
        relative_delta(1.0, 0.0)
