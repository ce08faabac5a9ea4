"""Corpus data model, tokenization, vocabulary and the synthetic generator."""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"

_PLACEHOLDER = re.compile(r"^<([A-Za-z_][A-Za-z0-9_]*)>$")


class Domain(str, Enum):
    MUSIC = "Music"
    NAVIGATION = "Navigation"
    SHOPPING = "Shopping"
    OTHER = "Other"


DOMAINS: tuple[Domain, ...] = (Domain.MUSIC, Domain.NAVIGATION, Domain.SHOPPING, Domain.OTHER)


class SlotType(str, Enum):
    SONG_NAME = "SongName"
    ARTIST_NAME = "ArtistName"
    ALBUM_NAME = "AlbumName"
    PLACE_NAME = "PlaceName"
    STREET_NAME = "StreetName"
    ITEM_NAME = "ItemName"


SLOT_DOMAIN: dict[SlotType, Domain] = {
    SlotType.SONG_NAME: Domain.MUSIC,
    SlotType.ARTIST_NAME: Domain.MUSIC,
    SlotType.ALBUM_NAME: Domain.MUSIC,
    SlotType.PLACE_NAME: Domain.NAVIGATION,
    SlotType.STREET_NAME: Domain.NAVIGATION,
    SlotType.ITEM_NAME: Domain.SHOPPING,
}


class Split(str, Enum):
    TRAIN = "Train"
    DEV = "Dev"
    EVAL = "Eval"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SlotSpan:
    start: int
    end: int
    slot: SlotType


@dataclass(frozen=True)
class Utterance:
    id: str
    tokens: tuple[str, ...]
    domain: Domain
    slots: tuple[SlotSpan, ...] = ()
    split: Split | None = None

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"utterance {self.id!r} has no tokens")
        prev_end = 0
        for span in self.slots:
            if not (0 <= span.start < span.end <= len(self.tokens)):
                raise CorpusError(f"utterance {self.id!r}: span {span} out of range")
            if span.start < prev_end:
                raise CorpusError(f"utterance {self.id!r}: spans overlap or are unsorted")
            if SLOT_DOMAIN[span.slot] is not self.domain:
                raise CorpusError(f"utterance {self.id!r}: {span.slot.value} not allowed in {self.domain.value}")
            prev_end = span.end

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "domain": self.domain.value,
            "slots": [{"start": s.start, "end": s.end, "slot": s.slot.value} for s in self.slots],
            "split": self.split.value if self.split is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        return cls(
            id=obj["id"],
            tokens=tuple(obj["tokens"]),
            domain=Domain(obj["domain"]),
            slots=tuple(SlotSpan(s["start"], s["end"], SlotType(s["slot"])) for s in obj.get("slots", [])),
            split=Split(obj["split"]) if obj.get("split") else None,
        )


_EDGE_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip punctuation from token edges."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_EDGE_PUNCT)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Dense token/id mapping with a reserved unknown token at id 0."""

    def __init__(self, tokens: Sequence[str], cap: int):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK:
            tokens = [UNK] + [t for t in tokens if t != UNK]
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        if len(tokens) > cap:
            raise CorpusError(f"vocabulary of size {len(tokens)} exceeds cap {cap}")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.unk_id = 0
        self.cap = cap

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token and self.cap == other.cap

    def __hash__(self):
        return hash((tuple(self.id_to_token), self.cap))

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_json(self) -> dict:
        return {"cap": self.cap, "tokens": self.id_to_token}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj["cap"])


def build_vocabulary(corpus: Iterable[Utterance], cap: int) -> Vocabulary:
    """Unk plus the ``cap - 1`` most frequent tokens; ties break lexicographically."""
    if cap < 1:
        raise CorpusError("cap must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for utt in corpus:
        counts.update(utt.tokens)
        n += 1
    if n == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([UNK] + [t for t, _ in ranked[: cap - 1]], cap)


def encode(tokens: Iterable[str], vocab: Vocabulary) -> list[int]:
    return vocab.encode(tokens)


# -- synthetic generator ------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    """Template grammar for the synthetic corpus.

    ``templates`` maps each domain name to template strings whose
    ``<Name>`` tokens are placeholders.  ``fillers`` maps placeholder names
    to phrase lists ordered by rank (rank 0 is the most frequent under Zipf
    sampling).  Placeholders named after a :class:`SlotType` yield slot
    spans; any other name (e.g. ``Appliance``) expands without annotation.
    """

    seed: int
    templates: dict[str, list[str]]
    fillers: dict[str, list[str]]
    utterances_per_domain: int
    zipf_exponent: float = 1.0
    _parsed: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.utterances_per_domain < 1:
            raise CorpusError("utterances_per_domain must be >= 1")
        if self.zipf_exponent < 0:
            raise CorpusError("zipf_exponent must be >= 0")
        parsed = {}
        for d in DOMAINS:
            temps = self.templates.get(d.value)
            if not temps:
                raise CorpusError(f"no templates for domain {d.value}")
            parsed[d] = [_parse_template(t) for t in temps]
            for toks in parsed[d]:
                for kind, val in toks:
                    if kind != "slot":
                        continue
                    if not self.fillers.get(val):
                        raise CorpusError(f"placeholder <{val}> has no fillers")
                    if val in SlotType._value2member_map_ and SLOT_DOMAIN[SlotType(val)] is not d:
                        raise CorpusError(f"slot <{val}> used outside its domain in {d.value}")
        object.__setattr__(self, "_parsed", parsed)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "utterances_per_domain": self.utterances_per_domain,
            "zipf_exponent": self.zipf_exponent,
            "templates": self.templates,
            "fillers": self.fillers,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorConfig":
        return cls(
            seed=int(obj["seed"]),
            templates={k: list(v) for k, v in obj["templates"].items()},
            fillers={k: list(v) for k, v in obj["fillers"].items()},
            utterances_per_domain=int(obj["utterances_per_domain"]),
            zipf_exponent=float(obj.get("zipf_exponent", 1.0)),
        )


def _parse_template(template: str) -> list[tuple[str, str]]:
    out = []
    for tok in template.split():
        m = _PLACEHOLDER.match(tok)
        if m:
            out.append(("slot", m.group(1)))
        else:
            out.extend(("word", w) for w in tokenize(tok))
    return out


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -exponent
    return w / w.sum()


def expand_template(parsed, choose_filler) -> tuple[list[str], list[SlotSpan]]:
    tokens: list[str] = []
    spans: list[SlotSpan] = []
    for kind, val in parsed:
        if kind == "word":
            tokens.append(val)
            continue
        phrase = tokenize(choose_filler(val))
        start = len(tokens)
        tokens.extend(phrase)
        if val in SlotType._value2member_map_:
            spans.append(SlotSpan(start, len(tokens), SlotType(val)))
    return tokens, spans


def generate_corpus(config: GeneratorConfig) -> list[Utterance]:
    rng = np.random.default_rng(config.seed)
    probs = {name: zipf_probabilities(len(f), config.zipf_exponent) for name, f in config.fillers.items()}

    def choose(name):
        return config.fillers[name][rng.choice(len(config.fillers[name]), p=probs[name])]

    out = []
    for d in DOMAINS:
        temps = config._parsed[d]
        for i in range(config.utterances_per_domain):
            parsed = temps[rng.integers(len(temps))]
            tokens, spans = expand_template(parsed, choose)
            out.append(Utterance(f"{d.value.lower()}-{i:06d}", tuple(tokens), d, tuple(spans)))
    return out


def split_corpus(corpus: Sequence[Utterance], seed: int, ratios=(8, 1, 1)) -> list[Utterance]:
    """Per-domain stratified shuffle split into Train/Dev/Eval."""
    if not corpus:
        raise CorpusError("cannot split an empty corpus")
    total = float(sum(ratios))
    assign: dict[int, Split] = {}
    for k, d in enumerate(DOMAINS):
        idx = [i for i, u in enumerate(corpus) if u.domain is d]
        if not idx:
            continue
        rng = np.random.default_rng([seed, k])
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_train = int(round(len(idx) * ratios[0] / total))
        n_dev = int(round(len(idx) * ratios[1] / total))
        for pos, i in enumerate(order):
            assign[i] = Split.TRAIN if pos < n_train else Split.DEV if pos < n_train + n_dev else Split.EVAL
    return [replace(u, split=assign[i]) for i, u in enumerate(corpus)]


def select(corpus: Iterable[Utterance], split: Split | None = None, domain: Domain | None = None) -> list[Utterance]:
    return [u for u in corpus if (split is None or u.split is split) and (domain is None or u.domain is domain)]


def write_jsonl(path: str | Path, utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in utterances:
            f.write(json.dumps(u.to_json(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[Utterance]:
    with open(path, encoding="utf-8") as f:
        return [Utterance.from_json(json.loads(line)) for line in f if line.strip()]
