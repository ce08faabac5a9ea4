"""Alignment-based scoring: WER, SlotWER, oracle WER and relative deltas.

Corpus figures are micro-averaged (pooled error counts over pooled
reference length).  SlotWER counts substitutions and deletions at reference
positions inside a slot span, plus insertions whose insertion point lies
strictly inside a span (both neighbouring reference tokens in the same
span).  Utterances without slots contribute nothing to SlotWER.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

from . import kernels
from .corpus import SlotSpan


class Op(IntEnum):
    MATCH = kernels.MATCH
    SUB = kernels.SUB
    DEL = kernels.DEL
    INS = kernels.INS


@dataclass(frozen=True)
class Edit:
    op: Op
    ref_pos: int  # for INS: index of the reference token the insertion precedes
    hyp_pos: int  # -1 for DEL


@dataclass(frozen=True)
class Alignment:
    edits: tuple[Edit, ...]

    @property
    def cost(self) -> int:
        return sum(e.op is not Op.MATCH for e in self.edits)

    def replay(self, ref: Sequence, hyp: Sequence) -> list:
        """Apply the edit script to ``ref``; the result must equal ``hyp``."""
        out = []
        for e in self.edits:
            if e.op is Op.MATCH:
                out.append(ref[e.ref_pos])
            elif e.op in (Op.SUB, Op.INS):
                out.append(hyp[e.hyp_pos])
        return out


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_tokens == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_tokens

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_tokens + other.ref_tokens,
        )

    def to_json(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "ref_tokens": self.ref_tokens,
            "wer": self.wer,
        }


ZERO = WerBreakdown(0, 0, 0, 0)


def _as_ids(ref: Sequence, hyp: Sequence):
    table: dict = {}
    r = [table.setdefault(t, len(table)) for t in ref]
    h = [table.setdefault(t, len(table)) for t in hyp]
    return r, h


def align(ref: Sequence, hyp: Sequence) -> Alignment:
    r, h = _as_ids(ref, hyp)
    ops = kernels.align_ops(r, h)
    edits = []
    i = j = 0
    for code in ops:
        op = Op(int(code))
        if op is Op.DEL:
            edits.append(Edit(op, i, -1))
            i += 1
        elif op is Op.INS:
            edits.append(Edit(op, i, j))
            j += 1
        else:
            edits.append(Edit(op, i, j))
            i += 1
            j += 1
    return Alignment(tuple(edits))


def utterance_wer(ref: Sequence, hyp: Sequence) -> WerBreakdown:
    r, h = _as_ids(ref, hyp)
    ops = kernels.align_ops(r, h)
    s = int((ops == kernels.SUB).sum())
    d = int((ops == kernels.DEL).sum())
    n_ins = int((ops == kernels.INS).sum())
    return WerBreakdown(s, d, n_ins, len(ref))


def corpus_wer(pairs: Iterable[tuple[Sequence, Sequence]]) -> WerBreakdown:
    total = ZERO
    n = 0
    for ref, hyp in pairs:
        total = total + utterance_wer(ref, hyp)
        n += 1
    if n == 0:
        raise ValueError("corpus_wer needs at least one pair")
    return total


def utterance_slot_wer(ref: Sequence, hyp: Sequence, spans: Sequence[SlotSpan]) -> WerBreakdown:
    if not spans:
        return ZERO
    inside = [None] * len(ref)
    for k, sp in enumerate(spans):
        for p in range(sp.start, sp.end):
            inside[p] = k
    s = d = n_ins = 0
    for e in align(ref, hyp).edits:
        if e.op is Op.SUB and inside[e.ref_pos] is not None:
            s += 1
        elif e.op is Op.DEL and inside[e.ref_pos] is not None:
            d += 1
        elif e.op is Op.INS and 0 < e.ref_pos < len(ref):
            left, right = inside[e.ref_pos - 1], inside[e.ref_pos]
            if left is not None and left == right:
                n_ins += 1
    return WerBreakdown(s, d, n_ins, sum(sp.end - sp.start for sp in spans))


def slot_wer(items: Iterable[tuple[Sequence, Sequence, Sequence[SlotSpan]]]) -> WerBreakdown:
    total = ZERO
    for ref, hyp, spans in items:
        total = total + utterance_slot_wer(ref, hyp, spans)
    return total


def oracle_choice(ref: Sequence, hyps: Sequence[Sequence]) -> int:
    """Index of the hypothesis with fewest errors; ties go to the earliest."""
    best, best_err = 0, None
    for k, h in enumerate(hyps):
        err = utterance_wer(ref, h).errors
        if best_err is None or err < best_err:
            best, best_err = k, err
    return best


def oracle_wer(items: Iterable[tuple[Sequence, Sequence[Sequence]]]) -> WerBreakdown:
    total = ZERO
    n = 0
    for ref, hyps in items:
        if not hyps:
            raise ValueError("oracle_wer needs non-empty n-best lists")
        total = total + utterance_wer(ref, hyps[oracle_choice(ref, hyps)])
        n += 1
    if n == 0:
        raise ValueError("oracle_wer needs at least one n-best list")
    return total


def relative_delta(system: float, baseline: float) -> float:
    """Signed relative change in percent; negative means improvement."""
    if baseline == 0:
        raise ZeroDivisionError("relative delta against a zero baseline")
    return 100.0 * (system - baseline) / baseline
