"""Simulated first pass: a noisy word channel in place of an acoustic model.

Each reference is corrupted once into an *observation* (what the
recognizer "heard").  Candidate hypotheses are the observation, the
reference, and further corruptions of both.  A candidate's acoustic proxy
is the best edit-script log-probability of the channel producing the
observation from that candidate, plus Gaussian noise; the first-pass LM
score comes from the Kneser-Ney model.  The reference therefore competes
on equal terms and can be outscored or pruned.

Channel, for each source token: delete with ``p_del``, substitute with
``p_sub`` (replacement drawn with probability proportional to
``exp(-char_edit_distance / temperature)`` over the vocabulary, excluding
the token itself), otherwise copy.  Before each token and at the end, a
geometric number of vocabulary words is inserted (continue probability
``p_ins``), drawn from the training unigram distribution or uniformly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .corpus import UNK, Utterance, Vocabulary
from .ngram_lm import NGramModel


class ChannelError(ValueError):
    pass


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


@dataclass(frozen=True)
class ChannelConfig:
    p_sub: float = 0.08
    p_del: float = 0.03
    p_ins: float = 0.03
    temperature: float = 1.0
    sigma: float = 1.0
    n_best: int = 10
    oversample: int = 4
    lm_weight: float = 0.25
    insertion: str = "unigram"
    seed: int = 0

    def __post_init__(self):
        if min(self.p_sub, self.p_del, self.p_ins) < 0 or self.p_sub + self.p_del > 1 or self.p_ins >= 1:
            raise ChannelError("invalid channel probabilities")
        if self.n_best < 1 or self.oversample < 1:
            raise ChannelError("n_best and oversample must be >= 1")
        if self.sigma < 0 or self.temperature <= 0:
            raise ChannelError("sigma must be >= 0 and temperature > 0")
        if self.insertion not in ("unigram", "uniform"):
            raise ChannelError(f"unknown insertion distribution {self.insertion!r}")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[str, ...]
    am: float
    lm: float

    def first_pass_score(self, lm_weight: float = 1.0) -> float:
        return self.am + lm_weight * self.lm


@dataclass(frozen=True)
class NBestList:
    id: str
    ref: tuple[str, ...]
    hyps: tuple[Hypothesis, ...]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "ref": list(self.ref),
            "hyps": [{"tokens": list(h.tokens), "am": h.am, "lm": h.lm} for h in self.hyps],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NBestList":
        return cls(
            obj["id"],
            tuple(obj["ref"]),
            tuple(Hypothesis(tuple(h["tokens"]), float(h["am"]), float(h["lm"])) for h in obj["hyps"]),
        )


@dataclass(frozen=True)
class EditStep:
    op: str  # "match" | "sub" | "del" | "ins"
    src: str | None
    out: str | None
    logp: float


def unigram_counts(corpus: Iterable[Utterance]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for u in corpus:
        for t in u.tokens:
            counts[t] = counts.get(t, 0) + 1
    return counts


class Channel:
    def __init__(self, vocab: Vocabulary, config: ChannelConfig, counts: dict[str, int] | None = None):
        self.config = config
        self.pool = [t for t in vocab.id_to_token if t != UNK]
        if not self.pool:
            raise ChannelError("empty substitution pool")
        self.pool_index = {t: i for i, t in enumerate(self.pool)}
        self._rows: dict[str, np.ndarray] = {}
        c = config
        if c.insertion == "unigram":
            if counts is None:
                raise ChannelError("unigram insertions need training counts")
            w = np.array([counts.get(t, 0) for t in self.pool], dtype=np.float64) + 1.0
        else:
            w = np.ones(len(self.pool))
        self.ins_q = w / w.sum()
        self.ins_cdf = np.cumsum(self.ins_q)
        self.log_match = _log(1.0 - c.p_sub - c.p_del)
        self.log_del = _log(c.p_del)
        self.log_sub = _log(c.p_sub)
        self.log_p_ins = _log(c.p_ins)
        self.log_stop = _log(1.0 - c.p_ins)

    def ins_logprob(self, word: str) -> float:
        k = self.pool_index.get(word)
        if k is None:
            return -math.inf
        return self.log_p_ins + math.log(self.ins_q[k])

    def sub_logq(self, word: str) -> np.ndarray:
        """Log substitution distribution of ``word`` over the pool."""
        row = self._rows.get(word)
        if row is None:
            d = kernels.char_distance_row(word, self.pool).astype(np.float64)
            logits = -d / self.config.temperature
            k = self.pool_index.get(word)
            if k is not None:
                logits[k] = -np.inf
            m = logits.max()
            row = logits - (m + math.log(np.exp(logits - m).sum()))
            self._rows[word] = row
        return row

    def sample(self, tokens: Sequence[str], rng: np.random.Generator) -> tuple[list[str], list[EditStep]]:
        c = self.config
        out: list[str] = []
        script: list[EditStep] = []

        def insertions():
            while c.p_ins > 0 and rng.random() < c.p_ins:
                k = min(int(np.searchsorted(self.ins_cdf, rng.random(), side="right")), len(self.pool) - 1)
                w = self.pool[k]
                out.append(w)
                script.append(EditStep("ins", None, w, self.ins_logprob(w)))

        for tok in tokens:
            insertions()
            u = rng.random()
            if u < c.p_del:
                script.append(EditStep("del", tok, None, self.log_del))
            elif u < c.p_del + c.p_sub:
                row = self.sub_logq(tok)
                probs = np.exp(row)
                j = int(rng.choice(len(self.pool), p=probs / probs.sum()))
                w = self.pool[j]
                out.append(w)
                script.append(EditStep("sub", tok, w, self.log_sub + row[j]))
            else:
                out.append(tok)
                script.append(EditStep("match", tok, tok, self.log_match))
        insertions()
        return out, script

    def script_logprob(self, script: Sequence[EditStep], n_src: int) -> float:
        """Log-probability of an edit script, including the insertion stop terms."""
        return math.fsum([s.logp for s in script] + [(n_src + 1) * self.log_stop])

    def score(self, src: Sequence[str], obs: Sequence[str]) -> float:
        """Best edit-script log-probability of producing ``obs`` from ``src``."""
        table: dict[str, int] = {}
        s_ids = [table.setdefault(t, len(table)) for t in src]
        o_ids = [table.setdefault(t, len(table)) for t in obs]
        obs_pool = np.array([self.pool_index.get(t, -1) for t in obs], dtype=np.int64)
        sub = np.full((len(src), len(obs)), -np.inf)
        ok = obs_pool >= 0
        for i, t in enumerate(src):
            if ok.any():
                sub[i, ok] = self.log_sub + self.sub_logq(t)[obs_pool[ok]]
        ins = np.array([self.ins_logprob(t) for t in obs])
        best = kernels.channel_viterbi(s_ids, o_ids, sub, self.log_match, self.log_del, ins)
        return best + (len(src) + 1) * self.log_stop


def utterance_seed(global_seed: int, utt_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{utt_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def simulate_nbest(reference: Utterance, channel: Channel, firstpass: NGramModel) -> NBestList:
    c = channel.config
    rng = np.random.default_rng(utterance_seed(c.seed, reference.id))
    ref = list(reference.tokens)
    obs, _ = channel.sample(ref, rng)
    half = c.oversample * c.n_best // 2
    candidates = [obs, ref]
    candidates += [channel.sample(obs, rng)[0] for _ in range(half)]
    candidates += [channel.sample(ref, rng)[0] for _ in range(c.oversample * c.n_best - half)]
    seen, unique = set(), []
    for cand in candidates:
        key = tuple(cand)
        if key and key not in seen:
            seen.add(key)
            unique.append(key)
    noise = rng.normal(0.0, c.sigma, size=len(unique)) if c.sigma > 0 else np.zeros(len(unique))
    scored = []
    for k, cand in enumerate(unique):
        am = channel.score(cand, obs) + float(noise[k])
        lm = firstpass.sentence_logprob(cand)
        scored.append((am + c.lm_weight * lm, k, Hypothesis(cand, am, lm)))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return NBestList(reference.id, tuple(ref), tuple(h for _, _, h in scored[: c.n_best]))


def onebest(nbest: NBestList) -> Hypothesis:
    if not nbest.hyps:
        raise ChannelError(f"n-best list {nbest.id!r} is empty")
    return nbest.hyps[0]


def write_nbest(path, lists: Iterable[NBestList]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for nb in lists:
            f.write(json.dumps(nb.to_json(), sort_keys=True) + "\n")


def read_nbest(path) -> list[NBestList]:
    with open(path, encoding="utf-8") as f:
        return [NBestList.from_json(json.loads(line)) for line in f if line.strip()]
