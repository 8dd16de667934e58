"""Word error rate via edit alignment and unsmoothed corpus BLEU over token sequences."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

MAX_ORDER = 4


@dataclass(frozen=True)
class AlignmentCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            raise ValueError("WER undefined for an empty reference")
        return self.errors / self.ref_len

    def __add__(self, other: "AlignmentCounts") -> "AlignmentCounts":
        return AlignmentCounts(self.substitutions + other.substitutions,
                               self.deletions + other.deletions,
                               self.insertions + other.insertions,
                               self.ref_len + other.ref_len)


def align(reference: Sequence, hypothesis: Sequence) -> AlignmentCounts:
    """Unit-cost Levenshtein alignment.

    The backtrace prefers the diagonal (match/substitution), then insertion,
    then deletion, so counts are deterministic when several minimal
    alignments exist.
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ref[i - 1] != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    i, j = n, m
    s = d = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return AlignmentCounts(s, d, ins, n)


def wer(reference: Sequence, hypothesis: Sequence) -> tuple[float, AlignmentCounts]:
    if len(reference) == 0:
        raise ValueError("WER undefined for an empty reference")
    counts = align(reference, hypothesis)
    return counts.wer, counts


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int = 0
    ref_len: int = 0

    @classmethod
    def empty(cls) -> "BleuStats":
        return cls([0] * MAX_ORDER, [0] * MAX_ORDER)

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats([a + b for a, b in zip(self.matches, other.matches)],
                         [a + b for a, b in zip(self.totals, other.totals)],
                         self.hyp_len + other.hyp_len, self.ref_len + other.ref_len)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(reference: Sequence, hypothesis: Sequence) -> BleuStats:
    ref, hyp = list(reference), list(hypothesis)
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return BleuStats(matches, totals, len(hyp), len(ref))


def bleu_from_stats(stats: BleuStats) -> float:
    if stats.hyp_len == 0 or any(m == 0 for m in stats.matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(stats.matches, stats.totals)) / MAX_ORDER
    bp = 1.0 if stats.hyp_len >= stats.ref_len else math.exp(1.0 - stats.ref_len / stats.hyp_len)
    return 100.0 * bp * math.exp(log_p)


def corpus_bleu(references: Sequence[Sequence], hypotheses: Sequence[Sequence]) -> float:
    """Corpus BLEU in [0, 100]: orders 1-4, uniform weights, single reference, no smoothing."""
    if len(references) != len(hypotheses):
        raise ValueError(f"corpus_bleu: {len(references)} references vs {len(hypotheses)} hypotheses")
    if not references:
        raise ValueError("corpus_bleu: empty corpus")
    total = BleuStats.empty()
    for ref, hyp in zip(references, hypotheses):
        total = total + sentence_stats(ref, hyp)
    return bleu_from_stats(total)


# --- reports ----------------------------------------------------------------


def score_report(ids: Sequence[str], references: Sequence[Sequence[int]],
                 hypotheses: Sequence[Sequence[int]], config: dict | None = None) -> dict:
    """Corpus scores plus per-utterance rows. Corpus WER is the micro-average over summed counts."""
    if not references:
        raise ValueError("score_report: empty corpus")
    bleu = corpus_bleu(references, hypotheses)
    rows = []
    total = AlignmentCounts()
    for uid, ref, hyp in zip(ids, references, hypotheses):
        _, c = wer(ref, hyp)
        total = total + c
        rows.append({"id": uid, "ref_tokens": list(ref), "hyp_tokens": list(hyp),
                     "counts": asdict(c)})
    return {
        "corpus_wer": total.wer,
        "corpus_bleu": bleu,
        "counts": asdict(total),
        "n_utterances": len(rows),
        "config": config or {},
        "utterances": rows,
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")


def read_report(path) -> dict:
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("corpus_wer", "corpus_bleu", "counts", "utterances"):
        if key not in report:
            raise ValueError(f"report {path} lacks {key!r}")
    return report


def write_hypotheses(report: dict, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in report["utterances"]:
            fh.write(json.dumps({"id": row["id"], "ref_tokens": row["ref_tokens"],
                                 "hyp_tokens": row["hyp_tokens"]}) + "\n")
