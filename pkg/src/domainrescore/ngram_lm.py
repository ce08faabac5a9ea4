"""Interpolated Kneser-Ney n-gram language model.

Sentences are padded with a single ``<s>`` context token and predict a final
``</s>``.  The highest order, and any n-gram starting with ``<s>``, is
estimated from raw counts; all other lower orders use continuation counts
(number of distinct left neighbours).  Every level subtracts a fixed
discount ``D`` and interpolates with the next lower level; the unigram level
interpolates with the uniform distribution over the predictable tokens
(vocabulary plus ``</s>``).

Serialized format (JSON, ``format: "kn-ngram"``, ``version: 1``)::

    {"format", "version", "order", "discount", "vocab": {...},
     "counts": [[[ids...], count], ...]}

``counts`` holds raw counts of every n-gram of the top order and every
sentence-initial lower-order n-gram; all other tables are rebuilt on load,
so round-tripping reproduces scores bit-for-bit.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from typing import Iterable, Sequence

from .corpus import Utterance, Vocabulary

FORMAT_VERSION = 1


class NGramError(ValueError):
    pass


class NGramModel:
    def __init__(self, vocab: Vocabulary, order: int, discount: float):
        if order < 1:
            raise NGramError("order must be >= 1")
        if not 0.0 < discount < 1.0:
            raise NGramError("discount must lie in (0, 1)")
        self.vocab = vocab
        self.order = order
        self.discount = discount
        self.bos = len(vocab)
        self.eos = len(vocab) + 1
        self.n_predict = len(vocab) + 1
        # raw counts of n-grams that are scored with raw counts
        self.raw: dict[tuple, int] = {}
        # adjusted count a(g) per level: raw for top/<s>-initial, else continuation
        self.adjusted: list[dict[tuple, int]] = []
        # per context: (sum of adjusted counts, number of distinct successors)
        self.context_stats: list[dict[tuple, tuple[int, int]]] = []

    # -- training -----------------------------------------------------------

    def _fit(self, raw: dict[tuple, int]) -> None:
        n = self.order
        self.raw = dict(raw)
        # every m-gram occurrence is a suffix of the raw gram recorded at its end
        distinct = [set() for _ in range(n + 2)]
        for gram in raw:
            for m in range(1, len(gram) + 1):
                distinct[m].add(gram[-m:])
        adjusted: list[dict[tuple, int]] = [dict() for _ in range(n + 1)]
        for gram, c in raw.items():
            if len(gram) == n or gram[0] == self.bos:
                adjusted[len(gram)][gram] = c
        for k in range(1, n):
            for ext in distinct[k + 1]:
                g = ext[1:]
                if g[0] != self.bos:
                    adjusted[k][g] = adjusted[k].get(g, 0) + 1
        self.adjusted = adjusted
        stats: list[dict[tuple, tuple[int, int]]] = [dict() for _ in range(n + 1)]
        for k in range(1, n + 1):
            acc: dict[tuple, list[int]] = {}
            for gram, c in adjusted[k].items():
                s = acc.setdefault(gram[:-1], [0, 0])
                s[0] += c
                s[1] += 1
            stats[k] = {ctx: (s[0], s[1]) for ctx, s in acc.items()}
        self.context_stats = stats
        self._cache: dict[tuple, float] = {}

    # -- scoring --------------------------------------------------------------

    def _prob(self, ctx: tuple, w: int) -> float:
        """Interpolated KN probability at level ``len(ctx) + 1``."""
        key = ctx + (w,)
        p = self._cache.get(key)
        if p is not None:
            return p
        k = len(ctx) + 1
        d = self.discount
        if k == 1:
            total, types = self.context_stats[1].get((), (0, 0))
            lower = 1.0 / self.n_predict
            if total == 0:
                p = lower
            else:
                c = self.adjusted[1].get(key, 0)
                p = max(c - d, 0.0) / total + d * types / total * lower
        else:
            lower = self._prob(ctx[1:], w)
            stats = self.context_stats[k].get(ctx)
            if stats is None:
                p = lower
            else:
                total, types = stats
                c = self.adjusted[k].get(key, 0)
                p = max(c - d, 0.0) / total + d * types / total * lower
        self._cache[key] = p
        return p

    def _context(self, history: Sequence[int]) -> tuple:
        ctx = tuple(history[-(self.order - 1):]) if self.order > 1 else ()
        # drop leading tokens until the context has been observed
        while ctx and ctx not in self.context_stats[len(ctx) + 1]:
            ctx = ctx[1:]
        return ctx

    def log_prob_ids(self, history: Sequence[int], w: int) -> float:
        return math.log(self._prob(self._context(history), w))

    def log_prob(self, context: Sequence[str], word: str) -> float:
        """Natural-log P(word | context); ``context`` is the token history.

        An empty context means sentence start; pass ``"</s>"`` as ``word``
        for the end-of-sentence probability.
        """
        hist = [self.bos] + self.vocab.encode(context)
        w = self.eos if word == "</s>" else self.vocab.encode([word])[0]
        return self.log_prob_ids(hist, w)

    def sentence_logprobs(self, tokens: Sequence[str]) -> list[float]:
        """Per-token log-probabilities including the final ``</s>``."""
        ids = [self.bos] + self.vocab.encode(tokens) + [self.eos]
        return [self.log_prob_ids(ids[:i], ids[i]) for i in range(1, len(ids))]

    def sentence_logprob(self, tokens: Sequence[str]) -> float:
        return math.fsum(self.sentence_logprobs(tokens))

    def distribution(self, history: Sequence[int]) -> list[float]:
        ctx = self._context(history)
        return [self._prob(ctx, w) for w in range(self.n_predict + 1) if w != self.bos]

    # -- serialization ----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": "kn-ngram",
            "version": FORMAT_VERSION,
            "order": self.order,
            "discount": self.discount,
            "vocab": self.vocab.to_json(),
            "counts": [[list(g), c] for g, c in sorted(self.raw.items())],
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary | None = None) -> "NGramModel":
        if obj.get("format") != "kn-ngram" or obj.get("version") != FORMAT_VERSION:
            raise NGramError("unsupported n-gram model file")
        vocab = vocab if vocab is not None else Vocabulary.from_json(obj["vocab"])
        model = cls(vocab, obj["order"], obj["discount"])
        model._fit({tuple(g): c for g, c in obj["counts"]})
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, sort_keys=True)

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None) -> "NGramModel":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f), vocab)


def train_kneser_ney(corpus: Iterable[Utterance], vocab: Vocabulary, order: int = 3, discount: float = 0.75) -> NGramModel:
    model = NGramModel(vocab, order, discount)
    raw: dict[tuple, int] = defaultdict(int)
    n_sent = 0
    for utt in corpus:
        ids = [model.bos] + vocab.encode(utt.tokens) + [model.eos]
        n_sent += 1
        for i in range(1, len(ids)):
            start = max(0, i - order + 1)
            # the top-order gram ending at i, plus shorter <s>-initial grams
            raw[tuple(ids[start : i + 1])] += 1
    if n_sent == 0:
        raise NGramError("cannot train on an empty corpus")
    model._fit(dict(raw))
    return model


def perplexity(model: NGramModel, corpus: Iterable[Utterance]) -> float:
    total, n = 0.0, 0
    for utt in corpus:
        lps = model.sentence_logprobs(utt.tokens)
        total += math.fsum(lps)
        n += len(lps)
    if n == 0:
        raise NGramError("perplexity of an empty corpus")
    return math.exp(-total / n)
