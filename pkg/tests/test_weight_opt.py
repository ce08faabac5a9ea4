import math

import numpy as np
import pytest

from domainrescore.metrics import corpus_wer
from domainrescore.rescorer import RescoreConfig, flat_second_pass_scores, push_forward_rescore
from domainrescore.weight_opt import (
    PROBES,
    SLOT_WER,
    WER,
    EmConfig,
    OptimizationError,
    RescoringObjective,
    SaConfig,
    em_mixture_weights,
    sa_optimize,
    write_report,
)


def quadratic(lam, gamma):
    return (lam - 0.3) ** 2 + (gamma - 1.0) ** 2


# -- simulated annealing ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_sa_finds_quadratic_minimum(seed):
    res = sa_optimize(quadratic, SaConfig(seed=seed))
    lam, gamma = res.best_point
    assert max(abs(lam - 0.3), abs(gamma - 1.0)) <= 0.05


@pytest.mark.parametrize("seed", range(5))
def test_sa_never_worse_than_probes(seed):
    bumpy = lambda lam, gamma: quadratic(lam, gamma) + 0.05 * math.sin(20 * lam) * math.cos(7 * gamma)
    res = sa_optimize(bumpy, SaConfig(seed=seed, iterations=30))
    for lam, gamma in PROBES:
        assert res.best_value <= bumpy(lam, gamma)
    assert len(res.probes) == len(PROBES)


def test_sa_is_deterministic():
    a = sa_optimize(quadratic, SaConfig(seed=4))
    b = sa_optimize(quadratic, SaConfig(seed=4))
    assert a.best_point == b.best_point and a.trace == b.trace
    c = sa_optimize(quadratic, SaConfig(seed=5))
    assert c.trace != a.trace


def test_sa_shift_invariance():
    a = sa_optimize(quadratic, SaConfig(seed=2))
    b = sa_optimize(lambda lam, gamma: quadratic(lam, gamma) + 7.0, SaConfig(seed=2))
    assert a.best_point == b.best_point
    assert [s.accepted for s in a.trace] == [s.accepted for s in b.trace]
    assert [(s.lam, s.gamma) for s in a.trace] == [(s.lam, s.gamma) for s in b.trace]


def test_sa_trace_bookkeeping():
    cfg = SaConfig(seed=1, iterations=57)
    res = sa_optimize(quadratic, cfg)
    assert len(res.trace) == 57
    bests = [s.best_value for s in res.trace]
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))
    assert bests[-1] == res.best_value
    temps = [s.temperature for s in res.trace]
    np.testing.assert_allclose(temps, cfg.t0 * cfg.alpha ** np.arange(57))
    for s in res.trace:
        assert 0.0 <= s.lam <= 1.0 and 0.0 < s.gamma <= 2.0


def test_sa_always_accepts_improvements():
    res = sa_optimize(quadratic, SaConfig(seed=3, iterations=100))
    cur = min(res.probes.values())
    for s in res.trace:
        if s.value < cur:
            assert s.accepted
        if s.accepted:
            cur = s.value


def test_sa_memoizes_on_grid():
    calls = []

    def f(lam, gamma):
        calls.append((lam, gamma))
        return quadratic(lam, gamma)

    res = sa_optimize(f, SaConfig(seed=0, iterations=100, step=0.001))
    assert len(calls) == len(set(calls)) == res.evaluations
    for lam, gamma in calls:
        assert lam == round(lam, 3) and gamma == round(gamma, 3)


def test_sa_aborts_on_non_finite():
    with pytest.raises(OptimizationError):
        sa_optimize(lambda lam, gamma: float("nan"), SaConfig(iterations=3))


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(alpha=1.0), dict(alpha=0.0), dict(objective="bleu"), dict(t0=0)])
def test_sa_config_validation(kw):
    with pytest.raises(OptimizationError):
        SaConfig(**kw)


def test_report_layout(tmp_path):
    import json

    res = sa_optimize(quadratic, SaConfig(iterations=5))
    path = tmp_path / "r.json"
    write_report(path, res)
    obj = json.loads(path.read_text())
    assert {"best_lambda", "best_gamma", "best_wer", "trace"} <= set(obj)
    assert len(obj["trace"]) == 5


# -- EM -----------------------------------------------------------------------------


def test_em_one_step_hand_case():
    res = em_mixture_weights([[0.4], [0.1]], EmConfig(max_iterations=1), init=[0.5, 0.5])
    np.testing.assert_allclose(res.weights, [0.8, 0.2], atol=1e-15)
    assert res.loglik[0] == pytest.approx(math.log(0.25))
    assert res.loglik[1] == pytest.approx(math.log(0.8 * 0.4 + 0.2 * 0.1))


def test_em_equal_models_keep_init():
    p = np.tile(np.array([[0.1, 0.3, 0.05]]), (3, 1))
    res = em_mixture_weights(p, init=[0.2, 0.5, 0.3])
    np.testing.assert_allclose(res.weights, [0.2, 0.5, 0.3], atol=1e-15)


def test_em_likelihood_monotone_and_simplex():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K, T = int(rng.integers(2, 6)), int(rng.integers(1, 30))
        p = rng.random((K, T)) ** 3 + 1e-9
        res = em_mixture_weights(p, EmConfig(max_iterations=50, tolerance=1e-12))
        assert all(b >= a - 1e-12 for a, b in zip(res.loglik, res.loglik[1:]))
        assert np.all(res.weights >= 0)
        assert abs(res.weights.sum() - 1.0) <= 1e-12


def test_em_prefers_the_better_model():
    p = np.array([[0.5, 0.4, 0.6, 0.5], [0.01, 0.02, 0.01, 0.03]])
    res = em_mixture_weights(p, EmConfig(max_iterations=200, tolerance=1e-14))
    assert res.weights[0] > 0.95


def test_em_stops_on_tolerance():
    p = np.array([[0.5, 0.2], [0.1, 0.4]])
    res = em_mixture_weights(p, EmConfig(max_iterations=1000, tolerance=1e-3))
    assert len(res.loglik) < 1001
    assert res.loglik[-1] - res.loglik[-2] < 1e-3


def test_em_errors():
    with pytest.raises(OptimizationError):
        em_mixture_weights([[0.1, 0.2]])  # one model
    with pytest.raises(OptimizationError):
        em_mixture_weights([[0.1, 0.0], [0.2, 0.0]])  # token impossible under all models
    with pytest.raises(OptimizationError):
        em_mixture_weights([[0.1], [0.2]], init=[0.7, 0.7])
    with pytest.raises(OptimizationError):
        EmConfig(tolerance=0)


# -- rescoring objective ------------------------------------------------------------


def test_objective_matches_direct_rescoring(small_corpus, sampled_nbests, tiny_nlm):
    refs = {u.id: u for u in small_corpus}
    nbs = sampled_nbests[:60]
    lm_sp = [flat_second_pass_scores(nb, tiny_nlm) for nb in nbs]
    obj = RescoringObjective(nbs, lm_sp, [refs[nb.id] for nb in nbs])
    for lam, gamma in [(0.0, 1.0), (0.4, 0.3), (1.0, 2.0)]:
        cfg = RescoreConfig(lam=lam, gamma=gamma)
        best = [push_forward_rescore(nb, tiny_nlm, cfg).best for nb in nbs]
        expect = 100.0 * corpus_wer((nb.ref, b) for nb, b in zip(nbs, best)).wer
        assert obj(lam, gamma) == pytest.approx(expect, abs=1e-9)


def test_objective_slot_variant(small_corpus, sampled_nbests, tiny_nlm):
    refs = {u.id: u for u in small_corpus}
    nbs = [nb for nb in sampled_nbests if refs[nb.id].slots][:40]
    lm_sp = [flat_second_pass_scores(nb, tiny_nlm) for nb in nbs]
    obj = RescoringObjective(nbs, lm_sp, [refs[nb.id] for nb in nbs], kind=SLOT_WER)
    assert 0.0 <= obj(0.5, 1.0) <= 100.0 * 3
    with pytest.raises(OptimizationError):
        RescoringObjective([], [], [], kind=WER)
