"""LSTM domain classifier and threshold routing.

Inputs are truncated to the first ``max_len`` tokens and left-padded with a
reserved pad id.  The pad embedding is fixed at zero and padded steps are
masked out of the LSTM state update, so a padded input gives exactly the
posterior of the unpadded sequence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .corpus import DOMAINS, Domain, Utterance, Vocabulary
from .neural_lm import vocab_digest

log = logging.getLogger(__name__)

N_CLASSES = len(DOMAINS)


class ClassifierError(ValueError):
    pass


class ModelChoice(str, Enum):
    GENERAL = "General"
    MUSIC = "Music"
    NAVIGATION = "Navigation"
    SHOPPING = "Shopping"


_CLASS_TO_MODEL = {
    Domain.MUSIC: ModelChoice.MUSIC,
    Domain.NAVIGATION: ModelChoice.NAVIGATION,
    Domain.SHOPPING: ModelChoice.SHOPPING,
    Domain.OTHER: ModelChoice.GENERAL,
}


@dataclass
class ClfTrainConfig:
    learning_rate: float = 0.001
    epochs: int = 10
    batch_size: int = 32
    max_len: int = 10
    embed_dim: int = 100
    hidden: int = 64
    fc_dim: int = 64
    early_stop: nn.EarlyStopConfig = field(default_factory=lambda: nn.EarlyStopConfig(patience=2, min_delta=1e-4))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.early_stop, dict):
            self.early_stop = nn.EarlyStopConfig(**self.early_stop)


@dataclass(frozen=True)
class RoutingPolicy:
    threshold: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ClassifierError("threshold must lie in [0, 1]")


class DomainClassifier:
    def __init__(self, vocab: Vocabulary, config: ClfTrainConfig | None = None):
        config = config or ClfTrainConfig()
        rng = np.random.default_rng(config.seed)
        self.vocab = vocab
        self.max_len = config.max_len
        self.pad_id = len(vocab)
        self.embed = nn.Embedding("clf.embed", len(vocab) + 1, config.embed_dim, rng, pad_id=self.pad_id)
        self.lstm = nn.LSTM("clf.lstm", config.embed_dim, config.hidden, rng)
        self.fc = nn.Linear("clf.fc", config.hidden, config.fc_dim, rng)
        self.output = nn.Linear("clf.out", config.fc_dim, N_CLASSES, rng)

    def params(self) -> list[nn.Param]:
        return self.embed.params() + self.lstm.params() + self.fc.params() + self.output.params()

    def pad(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        ids = np.full((len(token_lists), self.max_len), self.pad_id, dtype=np.int64)
        for b, toks in enumerate(token_lists):
            enc = self.vocab.encode(list(toks)[: self.max_len])
            if enc:
                ids[b, self.max_len - len(enc) :] = enc
        return ids

    def _forward(self, ids: np.ndarray):
        mask = (ids != self.pad_id).astype(np.float64)
        x, ec = self.embed.forward(ids)
        _, (h, _), lc = self.lstm.forward(x, mask=mask)
        z, fc_in = self.fc.forward(h)
        a = np.tanh(z)
        logits, out_in = self.output.forward(a)
        return logits, (ec, lc, fc_in, a, out_in, ids.shape)

    def _backward(self, dlogits, caches):
        ec, lc, fc_in, a, out_in, (B, T) = caches
        da = self.output.backward(dlogits, out_in)
        dz = da * (1.0 - a * a)
        dh = self.fc.backward(dz, fc_in)
        dhs = np.zeros((B, T, dh.shape[1]))
        # only the final state feeds the head
        dhs[:, -1] = dh
        dx, _ = self.lstm.backward(dhs, lc)
        self.embed.backward(dx, ec)

    def loss_on(self, ids: np.ndarray, labels: np.ndarray, backward: bool = True) -> float:
        logits, caches = self._forward(ids)
        loss, dlogits = nn.softmax_cross_entropy(logits, labels)
        if backward:
            self._backward(dlogits, caches)
        return loss

    def posteriors_batch(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        logits, _ = self._forward(self.pad(token_lists))
        return nn.softmax(logits)

    def posteriors(self, tokens: Sequence[str]) -> np.ndarray:
        return self.posteriors_batch([tokens])[0]

    # -- serialization ------------------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        m = {
            "kind": "domain_classifier",
            "max_len": self.max_len,
            "embed_dim": self.embed.weight.value.shape[1],
            "hidden": self.lstm.hidden,
            "fc_dim": self.fc.weight.value.shape[1],
            "vocab_digest": vocab_digest(self.vocab),
        }
        m.update(meta or {})
        nn.save_tensors(path, {p.name: p.value for p in self.params()}, m)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "DomainClassifier":
        tensors, meta = nn.load_tensors(path)
        if meta.get("kind") != "domain_classifier":
            raise ClassifierError(f"{path} is not a classifier file")
        if meta["vocab_digest"] != vocab_digest(vocab):
            raise ClassifierError(f"{path}: vocabulary mismatch")
        cfg = ClfTrainConfig(max_len=meta["max_len"], embed_dim=meta["embed_dim"], hidden=meta["hidden"], fc_dim=meta["fc_dim"])
        model = cls(vocab, cfg)
        for p in model.params():
            p.value[...] = tensors[p.name]
        return model


def _labels(corpus: Sequence[Utterance]) -> np.ndarray:
    return np.array([DOMAINS.index(u.domain) for u in corpus], dtype=np.int64)


def train_classifier(train: Sequence[Utterance], dev: Sequence[Utterance], vocab: Vocabulary, config: ClfTrainConfig):
    labels = _labels(train)
    missing = [d.value for k, d in enumerate(DOMAINS) if not np.any(labels == k)]
    if missing:
        raise ClassifierError(f"classes absent from training data: {', '.join(missing)}")
    model = DomainClassifier(vocab, config)
    ids = model.pad([u.tokens for u in train])
    dev_ids = model.pad([u.tokens for u in dev]) if dev else None
    dev_labels = _labels(dev) if dev else None
    params = model.params()
    adam = nn.Adam(params, lr=config.learning_rate)
    stopper = nn.EarlyStopping(config.early_stop)
    rng = np.random.default_rng(config.seed)
    best = [p.value.copy() for p in params]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            sel = order[i : i + config.batch_size]
            loss = model.loss_on(ids[sel], labels[sel])
            nn.backward_and_step(params, loss, adam)
        if dev_ids is None:
            best = [p.value.copy() for p in params]
            continue
        dl = model.loss_on(dev_ids, dev_labels, backward=False)
        history.append(dl)
        log.info("classifier epoch %d dev loss %.4f", epoch + 1, dl)
        if stopper.update(dl):
            best = [p.value.copy() for p in params]
        elif stopper.should_stop:
            break
    for p, v in zip(params, best):
        p.value[...] = v
    return model, history


def route(posterior: Sequence[float], policy: RoutingPolicy) -> ModelChoice:
    """Domain model if its class wins with posterior >= threshold, else General."""
    p = np.asarray(posterior, dtype=np.float64)
    if p.shape != (N_CLASSES,) or not np.all(p >= 0) or not abs(p.sum() - 1.0) <= 1e-6:
        raise ClassifierError(f"malformed posterior {p!r}")
    k = int(np.argmax(p))  # first maximum wins: Music, Navigation, Shopping, Other
    if p[k] >= policy.threshold:
        return _CLASS_TO_MODEL[DOMAINS[k]]
    return ModelChoice.GENERAL


def routed_class(posterior, policy: RoutingPolicy) -> Domain:
    choice = route(posterior, policy)
    return Domain.OTHER if choice is ModelChoice.GENERAL else Domain(choice.value)


def confusion_matrix(true: Sequence[int], pred: Sequence[int]) -> np.ndarray:
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[t, p] += 1
    return cm


def precision_recall(cm: np.ndarray) -> dict[str, dict[str, float]]:
    out = {}
    for k, d in enumerate(DOMAINS):
        tp = cm[k, k]
        col, row = cm[:, k].sum(), cm[k, :].sum()
        out[d.value] = {
            "precision": float(tp / col) if col else 0.0,
            "recall": float(tp / row) if row else 0.0,
            "support": int(row),
        }
    return out


def evaluate_predictions(true: Sequence[int], posteriors: np.ndarray, threshold: float = 0.85) -> dict:
    if len(true) == 0:
        raise ClassifierError("empty evaluation set")
    true = np.asarray(true)
    pred = posteriors.argmax(axis=1)
    cm = confusion_matrix(true, pred)
    policy = RoutingPolicy(threshold)
    routed = np.array([DOMAINS.index(routed_class(p, policy)) for p in posteriors])
    rcm = confusion_matrix(true, routed)
    return {
        "classes": [d.value for d in DOMAINS],
        "confusion": cm.tolist(),
        "per_class": precision_recall(cm),
        "accuracy": float(np.trace(cm) / cm.sum()),
        "threshold": threshold,
        "routed_confusion": rcm.tolist(),
        "routed_accuracy": float(np.trace(rcm) / rcm.sum()),
        "routed_to_domain_model": int(sum(r != DOMAINS.index(Domain.OTHER) for r in routed)),
    }


def evaluate_classifier(model: DomainClassifier, corpus: Sequence[Utterance], threshold: float = 0.85, tokens=None) -> dict:
    """Report on ``corpus``; ``tokens`` optionally replaces the reference text (e.g. one-best)."""
    if not corpus:
        raise ClassifierError("empty evaluation set")
    inputs = tokens if tokens is not None else [u.tokens for u in corpus]
    return evaluate_predictions(_labels(corpus), model.posteriors_batch(inputs), threshold)


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
