"""Simulated annealing over (lambda, gamma) and EM mixture weights."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

WER = "WER"
SLOT_WER = "SlotWER"

LAMBDA_BOX = (0.0, 1.0)
# gamma must stay strictly positive; proposals are clipped to this floor
GAMMA_BOX = (1e-3, 2.0)
PROBES = ((0.0, 1.0), (0.5, 1.0), (1.0, 1.0))


class OptimizationError(ValueError):
    pass


@dataclass(frozen=True)
class SaConfig:
    iterations: int = 200
    t0: float = 1.0
    alpha: float = 0.95
    step: float = 0.1
    seed: int = 0
    objective: str = WER
    grid: float = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise OptimizationError("iterations must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise OptimizationError("alpha must lie in (0, 1)")
        if self.t0 <= 0 or self.step <= 0 or self.grid <= 0:
            raise OptimizationError("t0, step and grid must be > 0")
        if self.objective not in (WER, SLOT_WER):
            raise OptimizationError(f"unknown objective {self.objective!r}")


@dataclass(frozen=True)
class SaStep:
    iteration: int
    lam: float
    gamma: float
    value: float
    accepted: bool
    temperature: float
    best_value: float


@dataclass
class SaResult:
    best_point: tuple[float, float]
    best_value: float
    trace: list[SaStep]
    probes: dict[str, float] = field(default_factory=dict)
    evaluations: int = 0

    def report(self, objective: str = WER) -> dict:
        return {
            "objective": objective,
            "best_lambda": self.best_point[0],
            "best_gamma": self.best_point[1],
            "best_wer": self.best_value,
            "probes": self.probes,
            "evaluations": self.evaluations,
            "trace": [asdict(s) for s in self.trace],
        }


def _snap(x: float, grid: float) -> float:
    return round(round(x / grid) * grid, 10)


class _Memo:
    def __init__(self, fn: Callable[[float, float], float], grid: float):
        self.fn = fn
        self.grid = grid
        self.cache: dict[tuple[float, float], float] = {}

    def __call__(self, lam: float, gamma: float) -> tuple[tuple[float, float], float]:
        key = (_snap(lam, self.grid), max(_snap(gamma, self.grid), GAMMA_BOX[0]))
        if key not in self.cache:
            v = float(self.fn(*key))
            if not math.isfinite(v):
                raise OptimizationError(f"objective is not finite at {key}: {v}")
            self.cache[key] = v
        return key, self.cache[key]


def sa_optimize(objective: Callable[[float, float], float], config: SaConfig = SaConfig()) -> SaResult:
    """Minimize ``objective(lam, gamma)`` over [0, 1] x (0, 2].

    The chain starts from the best of the fixed probe points, so the result
    is never worse than any of them.  Points are evaluated on a grid of
    spacing ``config.grid``.
    """
    f = _Memo(objective, config.grid)
    rng = np.random.default_rng(config.seed)
    probes = {}
    best_x, best_v = None, math.inf
    for lam, gamma in PROBES:
        x, v = f(lam, gamma)
        probes[f"{x[0]:g},{x[1]:g}"] = v
        if v < best_v:
            best_x, best_v = x, v
    cur_x, cur_v = best_x, best_v
    t = config.t0
    trace = []
    for it in range(config.iterations):
        prop = np.asarray(cur_x) + rng.normal(0.0, config.step, size=2)
        lam = float(np.clip(prop[0], *LAMBDA_BOX))
        gamma = float(np.clip(prop[1], *GAMMA_BOX))
        x, v = f(lam, gamma)
        delta = v - cur_v
        accepted = delta < 0 or rng.random() < math.exp(-delta / t)
        if accepted:
            cur_x, cur_v = x, v
        if v < best_v:
            best_x, best_v = x, v
        trace.append(SaStep(it, x[0], x[1], v, bool(accepted), t, best_v))
        t *= config.alpha
    return SaResult(best_x, best_v, trace, probes, len(f.cache))


def write_report(path, result: SaResult, objective: str = WER, extra: dict | None = None) -> None:
    obj = result.report(objective)
    obj.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- EM -----------------------------------------------------------------------------


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 50
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.tolerance <= 0:
            raise OptimizationError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise OptimizationError("max_iterations must be >= 1")


@dataclass
class EmResult:
    weights: np.ndarray
    loglik: list[float]


def em_mixture_weights(probs, config: EmConfig = EmConfig(), init: Sequence[float] | None = None) -> EmResult:
    """Mixture weights maximizing sum_t log sum_k w_k p[k, t].

    ``probs`` has shape (K, T).  ``loglik[0]`` is the likelihood at the
    initial weights, followed by one entry per update.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 1:
        raise OptimizationError(f"expected (K>=2, T>=1) probabilities, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise OptimizationError("probabilities must be finite and non-negative")
    if np.any(p.sum(axis=0) == 0):
        raise OptimizationError("some token has zero probability under every model")
    K = p.shape[0]
    w = np.full(K, 1.0 / K) if init is None else np.asarray(init, dtype=np.float64).copy()
    if w.shape != (K,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise OptimizationError("initial weights must lie on the simplex")
    mix = w @ p
    trace = [float(np.log(mix).sum())]
    for _ in range(config.max_iterations):
        resp = w[:, None] * p / mix
        w = resp.mean(axis=1)
        w /= w.sum()
        mix = w @ p
        trace.append(float(np.log(mix).sum()))
        if trace[-1] - trace[-2] < config.tolerance:
            break
    return EmResult(w, trace)


# -- rescoring objective ------------------------------------------------------------


class RescoringObjective:
    """Dev-set WER (or SlotWER) in percent as a function of (lam, gamma).

    Per-hypothesis error counts are computed once, so each evaluation is a
    vectorized argmax over padded (utterance, hypothesis) score arrays.
    Ties go to the earlier (higher first-pass) hypothesis.
    """

    def __init__(self, nbests, lm_sp, references, kind: str = WER):
        from .metrics import utterance_slot_wer, utterance_wer

        if not nbests:
            raise OptimizationError("empty dev set")
        if kind not in (WER, SLOT_WER):
            raise OptimizationError(f"unknown objective {kind!r}")
        U = len(nbests)
        N = max(len(nb.hyps) for nb in nbests)
        self.am = np.full((U, N), -np.inf)
        self.fp = np.zeros((U, N))
        self.sp = np.zeros((U, N))
        self.err = np.zeros((U, N))
        total = 0
        for u, (nb, sp, ref) in enumerate(zip(nbests, lm_sp, references)):
            n = len(nb.hyps)
            self.am[u, :n] = [h.am for h in nb.hyps]
            self.fp[u, :n] = [h.lm for h in nb.hyps]
            self.sp[u, :n] = sp
            for j, h in enumerate(nb.hyps):
                if kind == WER:
                    b = utterance_wer(ref.tokens, h.tokens)
                else:
                    b = utterance_slot_wer(ref.tokens, h.tokens, ref.slots)
                self.err[u, j] = b.errors
            total += len(ref.tokens) if kind == WER else sum(s.end - s.start for s in ref.slots)
        if total == 0:
            raise OptimizationError(f"no reference tokens for the {kind} objective")
        self.total = total
        self.rows = np.arange(U)

    def choices(self, lam: float, gamma: float) -> np.ndarray:
        s = self.am + gamma * (lam * self.fp + (1.0 - lam) * self.sp)
        return np.argmax(s, axis=1)

    def __call__(self, lam: float, gamma: float) -> float:
        return 100.0 * float(self.err[self.rows, self.choices(lam, gamma)].sum()) / self.total
