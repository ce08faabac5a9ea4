"""Second-pass rescoring of n-best lists over a prefix trie.

Hypotheses that share a prefix share trie nodes, so the language model is
advanced once per arc and queried once per arc plus once for end of
sentence at each hypothesis end.  The combined score is

    S(h) = am(h) + gamma * (lam * lm_fp(h) + (1 - lam) * lm_sp(h))

where ``lm_sp`` is the second-pass sentence log-score (with end of
sentence) plus ``ln(unk_scale)`` for every out-of-vocabulary token.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .classifier import DomainClassifier, ModelChoice, RoutingPolicy, route
from .corpus import Vocabulary
from .firstpass_sim import NBestList, onebest
from .neural_lm import NeuralLM, vocab_digest
from .weight_opt import EmConfig, em_mixture_weights

GENERAL = "genrl"
DOMAIN_AWARE = "domain"
EM_BASELINE = "em-baseline"


class RescoreError(ValueError):
    pass


@dataclass(frozen=True)
class RescoreConfig:
    lam: float = 0.5
    gamma: float = 1.0
    unk_scale: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise RescoreError("lam must lie in [0, 1]")
        if not 0.0 < self.gamma <= 2.0:
            raise RescoreError("gamma must lie in (0, 2]")
        if not 0.0 < self.unk_scale <= 1.0:
            raise RescoreError("unk_scale must lie in (0, 1]")


# -- lattice ------------------------------------------------------------------------


@dataclass
class TrieNode:
    token: str | None = None
    children: dict[str, "TrieNode"] = field(default_factory=dict)
    # index of the hypothesis that ends here, if any
    leaf: int | None = None


@dataclass
class PrefixLattice:
    root: TrieNode
    hyps: tuple  # first-pass Hypothesis objects, in first-pass rank order

    @property
    def n_arcs(self) -> int:
        n, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            n += len(node.children)
            stack.extend(node.children.values())
        return n

    @property
    def n_leaves(self) -> int:
        n, stack = 0, [self.root]
        while stack:
            node = stack.pop()
            n += node.leaf is not None
            stack.extend(node.children.values())
        return n

    def paths(self) -> dict[int, tuple[str, ...]]:
        """Hypothesis index -> token path from the root."""
        out = {}
        stack = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            if node.leaf is not None:
                out[node.leaf] = path
            for tok, child in node.children.items():
                stack.append((child, path + (tok,)))
        return out


def build_lattice(nbest: NBestList) -> PrefixLattice:
    if not nbest.hyps:
        raise RescoreError(f"n-best list {nbest.id!r} is empty")
    root = TrieNode()
    for i, h in enumerate(nbest.hyps):
        node = root
        for tok in h.tokens:
            child = node.children.get(tok)
            if child is None:
                child = node.children[tok] = TrieNode(tok)
            node = child
        if node.leaf is not None:
            raise RescoreError(f"duplicate hypothesis in {nbest.id!r}: {' '.join(h.tokens)}")
        node.leaf = i
    return PrefixLattice(root, nbest.hyps)


# -- language-model adaptors --------------------------------------------------------


class MixtureLM:
    """Linear interpolation of several LMs in probability space."""

    def __init__(self, models: Sequence[NeuralLM], weights: Sequence[float]):
        if len(models) != len(weights) or not models:
            raise RescoreError("need one weight per model")
        digests = {vocab_digest(m.vocab) for m in models}
        if len(digests) != 1:
            raise RescoreError("mixture components must share a vocabulary")
        self.models = list(models)
        with np.errstate(divide="ignore"):
            self.log_w = np.log(np.asarray(weights, dtype=np.float64))
        self.vocab = models[0].vocab
        self.bos = models[0].bos
        self.eos = models[0].eos

    @property
    def steps(self) -> int:
        return self.models[0].steps

    def initial_state(self):
        return tuple(m.initial_state() for m in self.models)

    def advance(self, state, token_id: int):
        return tuple(m.advance(s, token_id) for m, s in zip(self.models, state))

    def token_logprobs(self, state, ids):
        per = np.stack([m.token_logprobs(s, ids) for m, s in zip(self.models, state)])
        a = per + self.log_w[:, None]
        top = a.max(axis=0)
        # a zero-weight component contributes -inf and drops out
        return top + np.log(np.exp(a - top).sum(axis=0))


# -- push-forward -------------------------------------------------------------------


@dataclass
class PushForwardStats:
    advances: int = 0
    queries: int = 0


def second_pass_scores(lattice: PrefixLattice, model, unk_scale: float = 1e-5, stats: PushForwardStats | None = None) -> np.ndarray:
    """Second-pass log-score of every hypothesis, by depth-first traversal.

    Each node holds the model state after its prefix; the scores of all
    outgoing arcs (and end of sentence, if a hypothesis ends there) are
    taken from that single state.
    """
    vocab: Vocabulary = model.vocab
    unk_pen = math.log(unk_scale)
    out = np.full(len(lattice.hyps), np.nan)
    state = model.advance(model.initial_state(), model.bos)
    if stats is not None:
        stats.advances += 1
    stack = [(lattice.root, state, 0.0)]
    while stack:
        node, state, acc = stack.pop()
        toks = list(node.children)
        ids = [vocab.token_to_id.get(t, vocab.unk_id) for t in toks]
        query = ids + ([model.eos] if node.leaf is not None else [])
        lps = model.token_logprobs(state, query)
        if stats is not None:
            stats.queries += len(query)
        if node.leaf is not None:
            out[node.leaf] = acc + float(lps[-1])
        # reversed so the first child is expanded first
        for k in range(len(toks) - 1, -1, -1):
            child = node.children[toks[k]]
            gain = float(lps[k]) + (unk_pen if ids[k] == vocab.unk_id else 0.0)
            nxt = model.advance(state, ids[k])
            if stats is not None:
                stats.advances += 1
            stack.append((child, nxt, acc + gain))
    return out


def flat_second_pass_scores(nbest: NBestList, model, unk_scale: float = 1e-5) -> np.ndarray:
    """Reference implementation: score every hypothesis independently."""
    vocab = model.vocab
    unk_pen = math.log(unk_scale)
    out = []
    for h in nbest.hyps:
        ids = [vocab.token_to_id.get(t, vocab.unk_id) for t in h.tokens]
        state = model.advance(model.initial_state(), model.bos)
        total = 0.0
        for w in ids:
            total += float(model.token_logprobs(state, [w])[0]) + (unk_pen if w == vocab.unk_id else 0.0)
            state = model.advance(state, w)
        total += float(model.token_logprobs(state, [model.eos])[0])
        out.append(total)
    return np.array(out)


@dataclass(frozen=True)
class ScoredHypothesis:
    tokens: tuple[str, ...]
    score: float
    first_pass_rank: int
    lm_sp: float


@dataclass(frozen=True)
class RescoreResult:
    id: str
    system: str
    chosen_model: str
    ranked: tuple[ScoredHypothesis, ...]
    weights: tuple[float, ...] | None = None

    @property
    def best(self) -> tuple[str, ...]:
        return self.ranked[0].tokens

    def to_json(self) -> dict:
        obj = {
            "id": self.id,
            "system": self.system,
            "chosen_model": self.chosen_model,
            "ranked": [{"tokens": list(h.tokens), "score": h.score} for h in self.ranked],
        }
        if self.weights is not None:
            obj["weights"] = list(self.weights)
        return obj


def combined_scores(nbest: NBestList, lm_sp: np.ndarray, config: RescoreConfig) -> np.ndarray:
    am = np.array([h.am for h in nbest.hyps])
    fp = np.array([h.lm for h in nbest.hyps])
    return am + config.gamma * (config.lam * fp + (1.0 - config.lam) * np.asarray(lm_sp))


def rank(nbest: NBestList, lm_sp: np.ndarray, config: RescoreConfig) -> tuple[ScoredHypothesis, ...]:
    s = combined_scores(nbest, lm_sp, config)
    # stable sort on -score keeps first-pass order among ties
    order = np.argsort(-s, kind="stable")
    return tuple(ScoredHypothesis(nbest.hyps[i].tokens, float(s[i]), int(i), float(lm_sp[i])) for i in order)


def _check_vocab(model, vocab: Vocabulary | None):
    if vocab is not None and vocab_digest(model.vocab) != vocab_digest(vocab):
        raise RescoreError("rescoring model vocabulary does not match the corpus vocabulary")


def push_forward_rescore(
    nbest: NBestList,
    model,
    config: RescoreConfig,
    vocab: Vocabulary | None = None,
    system: str = GENERAL,
    chosen_model: str = ModelChoice.GENERAL.value,
) -> RescoreResult:
    _check_vocab(model, vocab)
    lm_sp = second_pass_scores(build_lattice(nbest), model, config.unk_scale)
    return RescoreResult(nbest.id, system, chosen_model, rank(nbest, lm_sp, config))


ModelBank = Mapping[ModelChoice, NeuralLM]


def _check_bank(bank: ModelBank):
    missing = [c.value for c in ModelChoice if c not in bank]
    if missing:
        raise RescoreError(f"model bank lacks: {', '.join(missing)}")
    if len({vocab_digest(m.vocab) for m in bank.values()}) != 1:
        raise RescoreError("model bank vocabularies differ")


def choose_model(nbest: NBestList, classifier: DomainClassifier, policy: RoutingPolicy) -> ModelChoice:
    return route(classifier.posteriors(onebest(nbest).tokens), policy)


def domain_aware_rescore(
    nbest: NBestList,
    classifier: DomainClassifier,
    policy: RoutingPolicy,
    bank: ModelBank,
    configs: Mapping[ModelChoice, RescoreConfig] | RescoreConfig,
) -> RescoreResult:
    """Classify the one-best, route, and rescore with the routed model.

    ``configs`` may give separate weights per routed model.
    """
    _check_bank(bank)
    choice = choose_model(nbest, classifier, policy)
    cfg = configs if isinstance(configs, RescoreConfig) else configs[choice]
    res = push_forward_rescore(nbest, bank[choice], cfg, system=DOMAIN_AWARE, chosen_model=choice.value)
    return res


def token_probabilities(models: Sequence[NeuralLM], tokens: Sequence[str]) -> np.ndarray:
    """(K, T+1) probabilities of ``tokens`` plus end of sentence under each model."""
    rows = []
    for m in models:
        rows.append(np.exp(m.score_sequence(tokens)))
    return np.stack(rows)


def em_weights(nbest: NBestList, models: Sequence[NeuralLM], em: EmConfig) -> np.ndarray:
    return em_mixture_weights(token_probabilities(models, onebest(nbest).tokens), em).weights


def em_interpolated_rescore(
    nbest: NBestList,
    models: Sequence[NeuralLM],
    em: EmConfig,
    config: RescoreConfig,
) -> RescoreResult:
    """Per-utterance EM weights from the one-best, then a linear mixture."""
    w = em_weights(nbest, models, em)
    mix = MixtureLM(models, w)
    lm_sp = second_pass_scores(build_lattice(nbest), mix, config.unk_scale)
    return RescoreResult(nbest.id, EM_BASELINE, "Mixture", rank(nbest, lm_sp, config), tuple(float(x) for x in w))


def write_results(path, results: Sequence[RescoreResult]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_results(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
