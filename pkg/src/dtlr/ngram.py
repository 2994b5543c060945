"""Character-level back-off n-gram language model.

Interpolated absolute discounting with a uniform base distribution: for a
history h with total count c(h), distinct-continuation count n1+(h) and
discount D,

    P(w | h) = max(c(hw) - D, 0) / c(h)  +  D * n1+(h) / c(h) * P(w | h')

which guarantees that continuation probabilities over the vocabulary sum
to one for every stored context. Models round-trip through the ARPA
plain-text format (log10 probabilities and back-off weights).
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Optional, Sequence

BOS = "<s>"
EOS = "</s>"
_SPACE_TOKEN = "<sp>"  # ARPA tokens are whitespace-delimited


def _escape(tok: str) -> str:
    return _SPACE_TOKEN if tok == " " else tok


def _unescape(tok: str) -> str:
    return " " if tok == _SPACE_TOKEN else tok


class NGramModel:
    """Count-based interpolated model over characters plus boundary markers."""

    def __init__(self, order: int, vocab: Sequence[str], discount: float = 0.75):
        if order < 1:
            raise ValueError("order must be >= 1")
        if not 0.0 < discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        self.order = order
        self.vocab = tuple(dict.fromkeys(vocab))  # predicted symbols; EOS included
        self.discount = discount
        # counts[k] maps a (k-1)-token context tuple to Counter over next token
        self.counts: list[dict[tuple, Counter]] = [defaultdict(Counter) for _ in range(order + 1)]
        self._totals: dict[tuple, int] = {}

    def add_sequence(self, symbols: Sequence[str]) -> None:
        unknown = sorted({s for s in symbols if s not in self.vocab})
        if unknown:
            raise ValueError(f"sequence symbols outside model vocabulary: {unknown!r}")
        tokens = [BOS] * (self.order - 1) + list(symbols) + [EOS]
        for i in range(self.order - 1, len(tokens)):
            for k in range(1, self.order + 1):
                ctx = tuple(tokens[i - k + 1:i])
                self.counts[k][ctx][tokens[i]] += 1
        self._totals.clear()

    def _total(self, ctx: tuple) -> int:
        if ctx not in self._totals:
            table = self.counts[len(ctx) + 1].get(ctx)
            self._totals[ctx] = sum(table.values()) if table else 0
        return self._totals[ctx]

    def prob(self, symbol: str, history: Sequence[str] = ()) -> float:
        """P(symbol | history); history is truncated to the model order."""
        ctx = tuple(history)[max(0, len(history) - (self.order - 1)):]
        return self._prob(symbol, ctx)

    def _prob(self, symbol: str, ctx: tuple) -> float:
        if len(ctx) == 0:
            table = self.counts[1].get((), Counter())
            total = self._total(())
            base = 1.0 / len(self.vocab)
            if total == 0:
                return base
            n1 = len(table)
            return (max(table.get(symbol, 0) - self.discount, 0.0)
                    + self.discount * n1 * base) / total
        table = self.counts[len(ctx) + 1].get(ctx)
        total = self._total(ctx)
        if not table or total == 0:
            return self._prob(symbol, ctx[1:])
        n1 = len(table)
        hi = max(table.get(symbol, 0) - self.discount, 0.0) / total
        backoff = self.discount * n1 / total
        return hi + backoff * self._prob(symbol, ctx[1:])

    def logprob(self, symbol: str, history: Sequence[str] = ()) -> float:
        return math.log(self.prob(symbol, history))

    def logprob_sequence(self, symbols: Sequence[str],
                         bos: bool = True, eos: bool = True) -> float:
        """Natural-log probability of a symbol sequence."""
        history: list[str] = [BOS] * (self.order - 1) if bos else []
        total = 0.0
        for s in symbols:
            total += self.logprob(s, history)
            history.append(s)
        if eos:
            total += self.logprob(EOS, history)
        return total

    def contexts(self) -> list[tuple]:
        """Every stored context, all orders."""
        out = []
        for k in range(1, self.order + 1):
            out.extend(self.counts[k].keys())
        return out

    # ----- ARPA round trip -------------------------------------------------

    def _backoff_weight(self, ctx: tuple) -> float:
        table = self.counts[len(ctx) + 1].get(ctx)
        total = self._total(ctx)
        if not table or total == 0:
            return 1.0
        return self.discount * len(table) / total

    def to_arpa(self, path: str) -> None:
        """Write the model in ARPA back-off format (log10)."""
        grams: list[list[tuple[tuple, float, Optional[float]]]] = []
        for k in range(1, self.order + 1):
            section = []
            if k == 1:
                symbols = set(self.vocab) | set(self.counts[1].get((), Counter()))
                for w in sorted(symbols):
                    lp = math.log10(self._prob(w, ()))
                    bow = None
                    if k < self.order and (w,) in self.counts[2]:
                        bow = math.log10(self._backoff_weight((w,)))
                    section.append(((w,), lp, bow))
                # BOS is context-only: conventional dummy probability
                bow_bos = None
                if self.order > 1 and (BOS,) in self.counts[2]:
                    bow_bos = math.log10(self._backoff_weight((BOS,)))
                section.append(((BOS,), -99.0, bow_bos))
            else:
                seen = self.counts[k]
                for ctx in sorted(seen.keys()):
                    for w in sorted(seen[ctx]):
                        gram = ctx + (w,)
                        lp = math.log10(self._prob(w, ctx))
                        bow = None
                        if k < self.order and gram in self.counts[k + 1]:
                            bow = math.log10(self._backoff_weight(gram))
                        section.append((gram, lp, bow))
            grams.append(section)

        with open(path, "w", encoding="utf-8") as f:
            f.write("\\data\\\n")
            for k, section in enumerate(grams, start=1):
                f.write(f"ngram {k}={len(section)}\n")
            for k, section in enumerate(grams, start=1):
                f.write(f"\n\\{k}-grams:\n")
                for gram, lp, bow in section:
                    toks = " ".join(_escape(t) for t in gram)
                    if bow is None:
                        f.write(f"{lp:.7f}\t{toks}\n")
                    else:
                        f.write(f"{lp:.7f}\t{toks}\t{bow:.7f}\n")
            f.write("\n\\end\\\n")


class ArpaModel:
    """Back-off model read from an ARPA file; mirrors NGramModel queries."""

    def __init__(self, order: int, table: dict[tuple, tuple[float, Optional[float]]],
                 vocab: tuple[str, ...]):
        self.order = order
        self.table = table
        self.vocab = vocab

    @classmethod
    def load(cls, path: str) -> "ArpaModel":
        table: dict[tuple, tuple[float, Optional[float]]] = {}
        order = 0
        with open(path, encoding="utf-8") as f:
            section = 0
            for line in f:
                line = line.rstrip("\n")
                if not line or line.startswith("\\data\\") or line.startswith("ngram "):
                    continue
                if line.startswith("\\end\\"):
                    break
                if line.endswith("-grams:") and line.startswith("\\"):
                    section = int(line[1:line.index("-")])
                    order = max(order, section)
                    continue
                if section == 0:
                    continue
                parts = line.split("\t")
                lp = float(parts[0])
                gram = tuple(_unescape(t) for t in parts[1].split(" "))
                bow = float(parts[2]) if len(parts) > 2 else None
                table[gram] = (lp, bow)
        vocab = tuple(g[0] for g in table if len(g) == 1 and g[0] != BOS)
        return cls(order, table, vocab)

    def prob(self, symbol: str, history: Sequence[str] = ()) -> float:
        ctx = tuple(history)[max(0, len(history) - (self.order - 1)):]
        return self._prob(symbol, ctx)

    def _prob(self, symbol: str, ctx: tuple) -> float:
        entry = self.table.get(ctx + (symbol,))
        if entry is not None:
            return 10.0 ** entry[0]
        if not ctx:
            return 10.0 ** -99  # symbol absent from the file entirely
        parent = self.table.get(ctx)
        bow = 10.0 ** parent[1] if parent is not None and parent[1] is not None else 1.0
        return bow * self._prob(symbol, ctx[1:])

    def logprob(self, symbol: str, history: Sequence[str] = ()) -> float:
        return math.log(self.prob(symbol, history))

    def logprob_sequence(self, symbols: Sequence[str],
                         bos: bool = True, eos: bool = True) -> float:
        history: list[str] = [BOS] * (self.order - 1) if bos else []
        total = 0.0
        for s in symbols:
            total += self.logprob(s, history)
            history.append(s)
        if eos:
            total += self.logprob(EOS, history)
        return total


def train_ngram(corpus: Sequence[Sequence[str]], order: int,
                vocabulary: Optional[Sequence[str]] = None,
                discount: float = 0.75) -> NGramModel:
    """Train a character n-gram on transcripts (each a string or symbol list).

    ``vocabulary`` fixes the predicted symbol set (plus the end marker);
    by default it is the set of characters observed in the corpus. Any
    symbol in the vocabulary keeps positive probability in every context.
    """
    corpus = list(corpus)
    if len(corpus) == 0:
        raise ValueError("corpus must be nonempty")
    if vocabulary is None:
        vocabulary = sorted({c for line in corpus for c in line})
    model = NGramModel(order, list(vocabulary) + [EOS], discount=discount)
    for line in corpus:
        model.add_sequence(list(line))
    return model
