import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixspeech.metrics import (AlignmentCounts, corpus_bleu, read_report, score_report,
                               sentence_stats, wer, write_hypotheses, write_report)
from oracles import clipped_precisions, edit_distance


def test_wer_identical():
    value, counts = wer([1, 2, 3], [1, 2, 3])
    assert value == 0.0 and counts == AlignmentCounts(0, 0, 0, 3)


def test_wer_substitution_and_deletion():
    value, counts = wer("a b c d".split(), "a x c".split())
    assert (counts.substitutions, counts.deletions, counts.insertions) == (1, 1, 0)
    assert value == 0.5
    assert edit_distance("abcd", "axc") == 2


def test_wer_insertions_exceed_one():
    value, counts = wer(["a"], ["a", "b", "c"])
    assert counts.insertions == 2 and value == 2.0


def test_wer_empty_reference_errors():
    with pytest.raises(ValueError, match="empty reference"):
        wer([], [1])


def test_wer_tie_break_prefers_substitution():
    # "a b" vs "b a": two substitutions or one insertion plus one deletion, both cost 2
    _, counts = wer(["a", "b"], ["b", "a"])
    assert counts == AlignmentCounts(2, 0, 0, 2)


def test_wer_matches_edit_distance_on_random_pairs():
    rng = random.Random(1234)
    for _ in range(1000):
        ref = [rng.randrange(5) for _ in range(rng.randint(1, 12))]
        hyp = [rng.randrange(5) for _ in range(rng.randint(0, 12))]
        value, c = wer(ref, hyp)
        assert c.errors == edit_distance(ref, hyp)
        assert c.substitutions + c.deletions <= c.ref_len == len(ref)
        assert len(hyp) == c.ref_len - c.deletions + c.insertions
        assert value == c.errors / len(ref)


# --- BLEU ---


def test_bleu_identity_is_100():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9], [3, 3, 4, 5, 6, 7]]
    assert corpus_bleu(refs, refs) == 100.0


def test_bleu_empty_hypotheses_is_zero():
    assert corpus_bleu([[1, 2, 3, 4]], [[]]) == 0.0


def test_bleu_hand_counted_example():
    ref = "the cat sat on the mat".split()
    hyp = "the cat the cat sat".split()
    stats = sentence_stats(ref, hyp)
    precisions = [Fraction(m, t) for m, t in zip(stats.matches, stats.totals)]
    assert precisions == [Fraction(4, 5), Fraction(2, 4), Fraction(1, 3), Fraction(0, 2)]
    assert precisions == clipped_precisions(ref, hyp)
    assert corpus_bleu([ref], [hyp]) == 0.0


def test_bleu_brevity_penalty():
    ref = list(range(10))
    hyp = list(range(8))
    expected = 100 * math.exp(1 - 10 / 8) * math.exp(
        sum(math.log(float(p)) for p in clipped_precisions(ref, hyp)) / 4)
    assert corpus_bleu([ref], [hyp]) == pytest.approx(expected, rel=1e-12)


def test_bleu_length_mismatch_and_empty():
    with pytest.raises(ValueError):
        corpus_bleu([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        corpus_bleu([], [])


sentences = st.lists(st.lists(st.integers(0, 4), min_size=1, max_size=10), min_size=1, max_size=6)


@settings(max_examples=80, deadline=None)
@given(sentences, st.randoms(use_true_random=False))
def test_bleu_permutation_invariant_and_bounded(refs, rnd):
    hyps = [r[::-1] if i % 2 else r[:-1] for i, r in enumerate(refs)]
    score = corpus_bleu(refs, hyps)
    order = list(range(len(refs)))
    rnd.shuffle(order)
    assert corpus_bleu([refs[i] for i in order], [hyps[i] for i in order]) == score
    assert 0.0 <= score <= 100.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=9), st.lists(st.integers(0, 3), max_size=9))
def test_clipped_counts_match_oracle(ref, hyp):
    stats = sentence_stats(ref, hyp)
    oracle = clipped_precisions(ref, hyp)
    for n, (m, t) in enumerate(zip(stats.matches, stats.totals), start=1):
        assert m <= t
        expected = oracle[n - 1]
        assert (Fraction(m, t) if t else Fraction(0)) == expected


# --- reports ---


def test_report_round_trip_and_micro_average(tmp_path):
    refs = [[1, 2, 3, 4], [5, 6], [7, 8, 9]]
    hyps = [[1, 2, 4], [5, 6, 6, 6], [7, 8, 9]]
    report = score_report(["u0", "u1", "u2"], refs, hyps, {"modality": "audio"})
    total = AlignmentCounts()
    for row in report["utterances"]:
        total = total + AlignmentCounts(**row["counts"])
    assert report["corpus_wer"] == total.wer == (1 + 2) / 9
    path = tmp_path / "r.report.json"
    write_report(report, path)
    assert read_report(path) == report
    write_hypotheses(report, tmp_path / "h.jsonl")
    lines = (tmp_path / "h.jsonl").read_text().splitlines()
    assert len(lines) == 3


def test_report_empty_corpus_errors():
    with pytest.raises(ValueError):
        score_report([], [], [])


def test_read_report_rejects_incomplete(tmp_path):
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError):
        read_report(tmp_path / "bad.json")
