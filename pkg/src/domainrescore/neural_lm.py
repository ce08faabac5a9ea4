"""Two-layer LSTM language model with softmax or NCE training.

Input ids are vocabulary ids plus a begin-of-sentence id ``V``; output ids
are vocabulary ids plus an end-of-sentence id ``V``.  Models trained with
NCE are scored with their raw logits as log-probabilities (self-normalized,
no partition function at inference).
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import nn_core as nn
from .corpus import Utterance, Vocabulary

log = logging.getLogger(__name__)

SOFTMAX = "softmax"
NCE = "nce"


class LMError(ValueError):
    pass


@dataclass
class NlmTrainConfig:
    learning_rate: float = 0.005
    epochs: int = 6
    batch_size: int = 32
    loss: str = NCE
    nce_samples: int = 20
    embed_dim: int = 64
    hidden: int = 128
    clip: float = 5.0
    early_stop: nn.EarlyStopConfig = field(default_factory=lambda: nn.EarlyStopConfig(patience=2, min_delta=1e-4))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.early_stop, dict):
            self.early_stop = nn.EarlyStopConfig(**self.early_stop)
        if self.learning_rate <= 0:
            raise LMError("learning_rate must be > 0")
        if self.loss not in (SOFTMAX, NCE):
            raise LMError(f"unknown loss {self.loss!r}")
        if self.loss == NCE and self.nce_samples < 1:
            raise LMError("nce_samples must be >= 1")


@dataclass
class FinetuneConfig:
    lr_factor: float = 0.25
    epochs: int = 6
    early_stop: nn.EarlyStopConfig = field(default_factory=lambda: nn.EarlyStopConfig(patience=2, min_delta=1e-4))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.early_stop, dict):
            self.early_stop = nn.EarlyStopConfig(**self.early_stop)
        if not 0.0 < self.lr_factor <= 1.0:
            raise LMError("lr_factor must lie in (0, 1]")


@dataclass
class TrainHistory:
    dev_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    retained: list[float] = field(default_factory=list)

    def to_json(self):
        return asdict(self)


class OutputLayer:
    """Output projection stored row-per-word so NCE can gather rows."""

    def __init__(self, n_out: int, hidden: int, rng: np.random.Generator):
        self.weight = nn.Param("out.weight", nn.uniform_init(rng, (n_out, hidden)))
        self.bias = nn.Param("out.bias", np.zeros(n_out))

    def params(self):
        return [self.weight, self.bias]

    def logits(self, h):
        return h @ self.weight.value.T + self.bias.value


class NeuralLM:
    def __init__(self, vocab: Vocabulary, embed_dim: int = 64, hidden: int = 128, seed: int = 0, loss: str = NCE):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.size = len(vocab)
        self.bos = self.size
        self.eos = self.size
        self.loss = loss
        self.embed = nn.Embedding("embed", self.size + 1, embed_dim, rng)
        self.lstm1 = nn.LSTM("lstm1", embed_dim, hidden, rng)
        self.lstm2 = nn.LSTM("lstm2", hidden, hidden, rng)
        self.out = OutputLayer(self.size + 1, hidden, rng)
        self.noise_logq: np.ndarray | None = None
        self.steps = 0
        self.lineage: dict = {}

    @property
    def trained_with_nce(self) -> bool:
        return self.loss == NCE

    def params(self) -> list[nn.Param]:
        return self.embed.params() + self.lstm1.params() + self.lstm2.params() + self.out.params()

    def copy(self) -> "NeuralLM":
        other = copy.copy(self)
        for name in ("embed", "lstm1", "lstm2", "out"):
            setattr(other, name, copy.deepcopy(getattr(self, name)))
        other.noise_logq = None if self.noise_logq is None else self.noise_logq.copy()
        other.lineage = dict(self.lineage)
        other.steps = 0
        return other

    # -- inference ------------------------------------------------------------------

    def initial_state(self):
        H = self.lstm1.hidden
        z = np.zeros((1, H))
        return (z, z, z, z)

    def advance(self, state, token_id: int):
        """Feed one input id; returns the new state (h1, c1, h2, c2)."""
        self.steps += 1
        h1, c1, h2, c2 = state
        x = self.embed.weight.value[token_id : token_id + 1]
        h1, c1 = self.lstm1.step(x, h1, c1)
        h2, c2 = self.lstm2.step(h1, h2, c2)
        return (h1, c1, h2, c2)

    def token_logprobs(self, state, ids: Sequence[int]) -> np.ndarray:
        """Log-scores of output ``ids`` given the state's top hidden vector."""
        h = state[2][0]
        ids = np.asarray(ids, dtype=np.int64)
        s = self.out.weight.value[ids] @ h + self.out.bias.value[ids]
        if self.loss == NCE:
            return s
        full = self.out.logits(h)
        m = full.max()
        return s - (m + math.log(np.exp(full - m).sum()))

    def log_normalizer(self, state) -> float:
        full = self.out.logits(state[2][0])
        m = full.max()
        return float(m + math.log(np.exp(full - m).sum()))

    def distribution(self, state) -> np.ndarray:
        """Probabilities over all outputs (normalized explicitly)."""
        return nn.softmax(self.out.logits(state[2][0]))

    def score_ids(self, ids: Sequence[int]) -> np.ndarray:
        state = self.advance(self.initial_state(), self.bos)
        out = np.empty(len(ids) + 1)
        for t, w in enumerate(ids):
            out[t] = self.token_logprobs(state, [w])[0]
            state = self.advance(state, w)
        out[len(ids)] = self.token_logprobs(state, [self.eos])[0]
        return out

    def score_sequence(self, tokens: Sequence[str]) -> np.ndarray:
        """Per-token natural-log scores, length ``len(tokens) + 1`` (incl. EOS)."""
        return self.score_ids(self.vocab.encode(tokens))

    # -- batched training path ---------------------------------------------------------------

    def _batch(self, seqs: Sequence[Sequence[int]]):
        B = len(seqs)
        T = max(len(s) for s in seqs) + 1
        inp = np.zeros((B, T), dtype=np.int64)
        tgt = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T))
        for b, s in enumerate(seqs):
            n = len(s)
            inp[b, 0] = self.bos
            inp[b, 1 : n + 1] = s
            tgt[b, :n] = s
            tgt[b, n] = self.eos
            mask[b, : n + 1] = 1.0
        return inp, tgt, mask

    def _forward(self, inp):
        x, ec = self.embed.forward(inp)
        h1, _, c1 = self.lstm1.forward(x)
        h2, _, c2 = self.lstm2.forward(h1)
        return h2, (ec, c1, c2)

    def _backward(self, dh2, caches):
        ec, c1, c2 = caches
        d1, _ = self.lstm2.backward(dh2, c2)
        dx, _ = self.lstm1.backward(d1, c1)
        self.embed.backward(dx, ec)

    def batch_loss(self, seqs, rng: np.random.Generator | None = None, k: int = 20, backward: bool = True) -> float:
        """Loss on a batch; accumulates gradients when ``backward``."""
        inp, tgt, mask = self._batch(seqs)
        h2, caches = self._forward(inp)
        B, T, H = h2.shape
        W, b = self.out.weight, self.out.bias
        if self.loss == SOFTMAX:
            logits = h2 @ W.value.T + b.value
            loss, dlogits = nn.softmax_cross_entropy(logits, tgt, mask)
            if backward:
                d2 = dlogits.reshape(-1, W.value.shape[0])
                h = h2.reshape(-1, H)
                W.grad += d2.T @ h
                b.grad += d2.sum(axis=0)
                self._backward((d2 @ W.value).reshape(B, T, H), caches)
            return loss
        sel = mask.reshape(-1) > 0
        h = h2.reshape(-1, H)[sel]
        t = tgt.reshape(-1)[sel]
        noise = sample_noise(self.noise_logq, (len(t), k), rng)
        log_k = math.log(k)
        wt, wn = W.value[t], W.value[noise]
        s_t = (wt * h).sum(axis=1) + b.value[t]
        s_n = np.einsum("nh,nkh->nk", h, wn) + b.value[noise]
        loss, d_t, d_n = nn.nce_loss(s_t, s_n, self.noise_logq[t] + log_k, self.noise_logq[noise] + log_k)
        if backward:
            dh = d_t[:, None] * wt + np.einsum("nk,nkh->nh", d_n, wn)
            np.add.at(W.grad, t, d_t[:, None] * h)
            np.add.at(W.grad, noise.reshape(-1), (d_n[:, :, None] * h[:, None, :]).reshape(-1, H))
            np.add.at(b.grad, t, d_t)
            np.add.at(b.grad, noise.reshape(-1), d_n.reshape(-1))
            full = np.zeros((B * T, H))
            full[sel] = dh
            self._backward(full.reshape(B, T, H), caches)
        return loss

    def batch_logprobs(self, seqs: Sequence[Sequence[int]], normalize: bool = False) -> list[np.ndarray]:
        """Scores for many sequences at once (same values as ``score_ids`` up to rounding).

        With ``normalize`` an NCE model's scores are renormalized over the
        full output layer, giving true log-probabilities.
        """
        inp, tgt, mask = self._batch(seqs)
        h2, _ = self._forward(inp)
        W, b = self.out.weight.value, self.out.bias.value
        s = np.einsum("bth,bth->bt", h2, W[tgt]) + b[tgt]
        if self.loss == SOFTMAX or normalize:
            logits = h2 @ W.T + b
            m = logits.max(axis=-1)
            s = s - (m + np.log(np.exp(logits - m[..., None]).sum(axis=-1)))
        return [s[i, : len(q) + 1] for i, q in enumerate(seqs)]

    # -- serialization ------------------------------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        if self.noise_logq is not None:
            out["noise.logq"] = self.noise_logq
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path, meta: dict | None = None) -> None:
        m = {
            "kind": "neural_lm",
            "loss": self.loss,
            "embed_dim": self.embed.weight.value.shape[1],
            "hidden": self.lstm1.hidden,
            "vocab_size": self.size,
            "vocab_digest": vocab_digest(self.vocab),
            "lineage": self.lineage,
        }
        m.update(meta or {})
        nn.save_tensors(path, self.tensors(), m)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "NeuralLM":
        tensors, meta = nn.load_tensors(path)
        if meta.get("kind") != "neural_lm":
            raise LMError(f"{path} is not a neural LM file")
        if meta["vocab_digest"] != vocab_digest(vocab):
            raise LMError(f"{path}: vocabulary mismatch")
        model = cls(vocab, meta["embed_dim"], meta["hidden"], loss=meta["loss"])
        for p in model.params():
            p.value[...] = tensors[p.name]
        model.noise_logq = tensors.get("noise.logq")
        model.lineage = meta.get("lineage", {})
        return model


def vocab_digest(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.id_to_token).encode("utf-8")).hexdigest()[:16]


def unigram_noise(seqs: Iterable[Sequence[int]], n_out: int, eos: int, unk_id: int = 0) -> np.ndarray:
    """Log unigram distribution over output ids (tokens plus end of sentence).

    ``<unk>`` gets one pseudo-count so held-out OOV tokens stay scoreable.
    """
    counts = np.zeros(n_out)
    counts[unk_id] = 1.0
    for s in seqs:
        np.add.at(counts, np.asarray(s, dtype=np.int64), 1.0)
        counts[eos] += 1.0
    with np.errstate(divide="ignore"):
        return np.log(counts / counts.sum())


def sample_noise(logq: np.ndarray, shape, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(logq))
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(shape), side="right"), len(cdf) - 1)


def _dev_loss(model: NeuralLM, dev: Sequence[Sequence[int]], k: int, batch_size: int = 256) -> float:
    rng = np.random.default_rng(12345)
    total, n = 0.0, 0
    for i in range(0, len(dev), batch_size):
        chunk = dev[i : i + batch_size]
        w = sum(len(s) + 1 for s in chunk)
        if model.loss == SOFTMAX:
            total += model.batch_loss(chunk, backward=False) * w
        else:
            # NCE loss is a per-token mean over unmasked positions
            total += model.batch_loss(chunk, rng, k, backward=False) * w
        n += w
    return total / n


def _fit(model: NeuralLM, train, dev, lr, epochs, batch_size, k, clip, early, seed) -> TrainHistory:
    rng = np.random.default_rng(seed)
    params = model.params()
    adam = nn.Adam(params, lr=lr)
    stopper = nn.EarlyStopping(early)
    history = TrainHistory()
    best = [p.value.copy() for p in params]
    nn.zero_grads(params)
    if dev:
        stopper.update(_dev_loss(model, dev, k))
        history.dev_loss.append(stopper.best)
        history.retained.append(stopper.best)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), batch_size):
            batch = [train[j] for j in order[i : i + batch_size]]
            loss = model.batch_loss(batch, rng, k)
            nn.backward_and_step(params, loss, adam, clip)
        if not dev:
            best = [p.value.copy() for p in params]
            continue
        dl = _dev_loss(model, dev, k)
        history.dev_loss.append(dl)
        log.info("epoch %d dev loss %.4f", epoch + 1, dl)
        if stopper.update(dl):
            best = [p.value.copy() for p in params]
            history.best_epoch = epoch + 1
            history.retained.append(dl)
        elif stopper.should_stop:
            break
    for p, v in zip(params, best):
        p.value[...] = v
    model.steps = 0
    return history


def encode_corpus(corpus: Iterable[Utterance], vocab: Vocabulary) -> list[list[int]]:
    return [vocab.encode(u.tokens) for u in corpus]


def train_general(train: Sequence[Utterance], dev: Sequence[Utterance], vocab: Vocabulary, config: NlmTrainConfig):
    if not train:
        raise LMError("cannot train on an empty corpus")
    model = NeuralLM(vocab, config.embed_dim, config.hidden, seed=config.seed, loss=config.loss)
    tr = encode_corpus(train, vocab)
    model.noise_logq = unigram_noise(tr, model.size + 1, model.eos)
    # start from the unigram LM: rarely sampled words would otherwise keep
    # near-zero scores and inflate the (assumed unit) normalizer
    model.out.bias.value[...] = model.noise_logq
    history = _fit(
        model, tr, encode_corpus(dev, vocab), config.learning_rate, config.epochs,
        config.batch_size, config.nce_samples, config.clip, config.early_stop, config.seed,
    )
    model.lineage = {"parent": None, "learning_rate": config.learning_rate}
    return model, history


def finetune(
    general: NeuralLM,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    base: NlmTrainConfig,
    config: FinetuneConfig,
):
    """Continue training a copy of ``general`` at ``lr_factor`` times its learning rate."""
    if not train:
        raise LMError("domain corpus is empty")
    if len({u.domain for u in train}) != 1:
        raise LMError("fine-tuning corpus must come from a single domain")
    model = general.copy()
    lr = config.lr_factor * base.learning_rate
    history = _fit(
        model, encode_corpus(train, general.vocab), encode_corpus(dev, general.vocab), lr, config.epochs,
        base.batch_size, base.nce_samples, base.clip, config.early_stop, config.seed,
    )
    model.lineage = {"parent": general.digest(), "learning_rate": lr, "domain": train[0].domain.value}
    return model, history


def perplexity(model: NeuralLM, corpus: Sequence[Utterance], batch_size: int = 256, normalize: bool = False) -> float:
    """Per-token perplexity (end of sentence included).

    NCE models are scored with their self-normalized outputs unless
    ``normalize`` asks for the explicitly normalized distribution.
    """
    seqs = encode_corpus(corpus, model.vocab)
    if not seqs:
        raise LMError("perplexity of an empty corpus")
    total, n = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        for lp in model.batch_logprobs(seqs[i : i + batch_size], normalize):
            total += float(lp.sum())
            n += len(lp)
    return math.exp(-total / n)


def self_normalization(model: NeuralLM, corpus: Sequence[Utterance], n_prefixes: int = 100, seed: int = 0) -> float:
    """Mean |log sum_w exp(score)| over randomly drawn prefixes of ``corpus``."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_prefixes):
        u = corpus[rng.integers(len(corpus))]
        ids = model.vocab.encode(u.tokens)
        cut = int(rng.integers(len(ids) + 1))
        state = model.advance(model.initial_state(), model.bos)
        for w in ids[:cut]:
            state = model.advance(state, w)
        vals.append(abs(model.log_normalizer(state)))
    return float(np.mean(vals))
