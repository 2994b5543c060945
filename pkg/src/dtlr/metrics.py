"""Transcription quality measures: CER, SER, WA, AR, CR.

All corpus-level rates aggregate error counts over the whole corpus before
normalizing (total errors / total reference length), not as a mean of
per-line rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import WHITESPACE

# Edit ops, from the reference's point of view:
#   match - symbols equal, sub - replaced, del - missing from hypothesis,
#   ins - extra symbol in hypothesis.
MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass
class EditAlignment:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    ops: list[tuple[str, int, int]]  # (op, ref index or -1, hyp index or -1)

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_align(reference: Sequence, hypothesis: Sequence) -> EditAlignment:
    """Minimal unit-cost alignment between two symbol sequences.

    Tie-breaking during backtrace is deterministic: substitution is
    preferred over insertion, insertion over deletion.
    """
    n, m = len(reference), len(hypothesis)
    # d[i][j] = distance between reference[:i] and hypothesis[:j]
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ref_sym = reference[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ref_sym == hypothesis[j - 1] else 1)
            row[j] = min(sub, row[j - 1] + 1, prev[j] + 1)

    ops: list[tuple[str, int, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        cur = d[i][j]
        if i > 0 and j > 0 and reference[i - 1] == hypothesis[j - 1] and cur == d[i - 1][j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and cur == d[i - 1][j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and cur == d[i][j - 1] + 1:
            ops.append((INS, -1, j - 1))
            j -= 1
        else:
            ops.append((DEL, i - 1, -1))
            i -= 1
    ops.reverse()

    subs = sum(1 for op, _, _ in ops if op == SUB)
    dels = sum(1 for op, _, _ in ops if op == DEL)
    inss = sum(1 for op, _, _ in ops if op == INS)
    assert subs + dels + inss == d[n][m]
    return EditAlignment(subs, dels, inss, n, ops)


def _corpus_counts(pairs, drop_whitespace: bool = False):
    total_s = total_d = total_i = total_n = 0
    for ref, hyp in pairs:
        if drop_whitespace:
            ref = [c for c in ref if c != WHITESPACE]
            hyp = [c for c in hyp if c != WHITESPACE]
        a = edit_align(ref, hyp)
        total_s += a.substitutions
        total_d += a.deletions
        total_i += a.insertions
        total_n += a.ref_len
    if total_n == 0:
        raise ValueError("corpus has no reference symbols")
    return total_s, total_d, total_i, total_n


def cer(pairs, drop_whitespace: bool = False) -> float:
    """Character error rate: (S + D + I) / N aggregated over the corpus."""
    s, d, i, n = _corpus_counts(pairs, drop_whitespace)
    return (s + d + i) / n


def ser(pairs) -> float:
    """Symbol error rate over cipher symbol sequences; numerically CER."""
    return cer(pairs)


def _words(seq) -> list[tuple]:
    words, cur = [], []
    for sym in seq:
        if sym == WHITESPACE:
            if cur:
                words.append(tuple(cur))
                cur = []
        else:
            cur.append(sym)
    if cur:
        words.append(tuple(cur))
    return words


def wa(pairs) -> float:
    """Word accuracy: fraction of reference words aligned to an exact match.

    Word boundaries are whitespace symbols; alignment happens at word
    granularity with the same edit-distance machinery.
    """
    matched = total = 0
    for ref, hyp in pairs:
        ref_words, hyp_words = _words(ref), _words(hyp)
        total += len(ref_words)
        a = edit_align(ref_words, hyp_words)
        matched += sum(1 for op, _, _ in a.ops if op == MATCH)
    if total == 0:
        raise ValueError("corpus has no reference words")
    return matched / total


def ar_cr(pairs) -> tuple[float, float]:
    """Accurate rate and correct rate: AR = (N-D-S-I)/N, CR = (N-D-S)/N."""
    s, d, i, n = _corpus_counts(pairs)
    cr = (n - d - s) / n
    ar = (n - d - s - i) / n
    return ar, cr


def full_report(pairs) -> dict:
    """All metrics, as emitted by the eval CLI."""
    pairs = list(pairs)
    s, d, i, n = _corpus_counts(pairs)
    ar, cr_ = ar_cr(pairs)
    return {
        "cer": (s + d + i) / n,
        "ser": (s + d + i) / n,
        "wa": wa(pairs),
        "ar": ar,
        "cr": cr_,
        "n_lines": len(pairs),
        "n_chars": n,
    }
