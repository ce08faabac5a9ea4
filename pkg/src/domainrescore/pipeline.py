"""Experiment orchestration: config, stages, manifests and reports.

Every stage reads named artifacts under the output directory and writes
new ones together with a manifest (config hash, derived seed, input and
output sha256).  Artifacts are never overwritten: a single subcommand
refuses to run when any of its outputs exists, and ``run_all`` skips
stages whose manifest still verifies.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .classifier import (
    ClfTrainConfig,
    DomainClassifier,
    ModelChoice,
    RoutingPolicy,
    evaluate_classifier,
    route,
    train_classifier,
)
from .corpus import (
    Domain,
    GeneratorConfig,
    Split,
    Utterance,
    Vocabulary,
    build_vocabulary,
    generate_corpus,
    read_jsonl,
    select,
    split_corpus,
    write_jsonl,
)
from .firstpass_sim import Channel, ChannelConfig, NBestList, read_nbest, simulate_nbest, unigram_counts, write_nbest
from .metrics import corpus_wer, oracle_wer, relative_delta, slot_wer
from .neural_lm import FinetuneConfig, NeuralLM, NlmTrainConfig, finetune, perplexity, train_general
from .ngram_lm import NGramModel, train_kneser_ney
from .rescorer import (
    MixtureLM,
    RescoreConfig,
    RescoreResult,
    build_lattice,
    em_weights,
    rank,
    second_pass_scores,
    write_results,
)
from .weight_opt import EmConfig, RescoringObjective, SaConfig, sa_optimize

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


# -- config ---------------------------------------------------------------------------

SECTIONS = ("split", "ngram", "nlm", "finetune", "classifier", "channel", "rescore", "sa", "em")


@dataclass(frozen=True)
class RescoreDefaults:
    unk_scale: float = 1e-5
    threshold: float = 0.85


@dataclass
class ExperimentConfig:
    seed: int
    generator: GeneratorConfig
    vocab_cap: int = 2000
    split_ratios: tuple = (8, 1, 1)
    ngram_order: int = 3
    ngram_discount: float = 0.75
    nlm: NlmTrainConfig = field(default_factory=NlmTrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    classifier: ClfTrainConfig = field(default_factory=ClfTrainConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    rescore: RescoreDefaults = field(default_factory=RescoreDefaults)
    sa: SaConfig = field(default_factory=SaConfig)
    em: EmConfig = field(default_factory=EmConfig)
    out: str = "runs/desk"
    raw: dict = field(default_factory=dict, repr=False)


def _no_seed(name: str, section: dict) -> dict:
    if "seed" in section:
        raise PipelineError(f"config section {name!r} sets a seed; stage seeds derive from the global seed")
    return dict(section)


def load_config(path, seed: int | None = None, out: str | None = None, threshold: float | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PipelineError(f"config file not found: {path}") from None
    if seed is not None:
        raw["seed"] = seed
    if "seed" not in raw:
        raise PipelineError("config has no global seed")
    if threshold is not None:
        raw.setdefault("rescore", {})["threshold"] = threshold
    gen = raw.get("generator")
    if isinstance(gen, str):
        gen_path = (path.parent / gen).resolve()
        if not gen_path.exists():
            raise PipelineError(f"generator file not found: {gen_path}")
        gen_obj = json.loads(gen_path.read_text(encoding="utf-8"))
    elif isinstance(gen, dict):
        gen_obj = gen
    else:
        raise PipelineError("config needs a 'generator' object or file name")
    split = raw.get("split", {})
    ngram = raw.get("ngram", {})
    cfg = ExperimentConfig(
        seed=int(raw["seed"]),
        generator=GeneratorConfig.from_json(gen_obj),
        vocab_cap=int(raw.get("vocab_cap", 2000)),
        split_ratios=tuple(split.get("ratios", (8, 1, 1))),
        ngram_order=int(ngram.get("order", 3)),
        ngram_discount=float(ngram.get("discount", 0.75)),
        nlm=NlmTrainConfig(**_no_seed("nlm", raw.get("nlm", {}))),
        finetune=FinetuneConfig(**_no_seed("finetune", raw.get("finetune", {}))),
        classifier=ClfTrainConfig(**_no_seed("classifier", raw.get("classifier", {}))),
        channel=ChannelConfig(**_no_seed("channel", raw.get("channel", {}))),
        rescore=RescoreDefaults(**raw.get("rescore", {})),
        sa=SaConfig(**_no_seed("sa", raw.get("sa", {}))),
        em=EmConfig(**raw.get("em", {})),
        out=out or raw.get("paths", {}).get("out", "runs/desk"),
    )
    if not 0.0 <= cfg.rescore.threshold <= 1.0:
        raise PipelineError("rescore.threshold must lie in [0, 1]")
    cfg.raw = {
        "seed": cfg.seed,
        "generator": cfg.generator.to_json(),
        "vocab_cap": cfg.vocab_cap,
        "split": {"ratios": list(cfg.split_ratios)},
        "ngram": {"order": cfg.ngram_order, "discount": cfg.ngram_discount},
        "nlm": asdict(cfg.nlm),
        "finetune": asdict(cfg.finetune),
        "classifier": asdict(cfg.classifier),
        "channel": asdict(cfg.channel),
        "rescore": asdict(cfg.rescore),
        "sa": asdict(cfg.sa),
        "em": asdict(cfg.em),
    }
    return cfg


def subseed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- artifacts ------------------------------------------------------------------------

CORPUS = "corpus/corpus.jsonl"
VOCAB = "corpus/vocab.json"
NGRAM = "models/ngram.json"
CLASSIFIER = "models/classifier.bin"
CLASSIFIER_REPORT = "models/classifier_report.json"
NBEST_DEV = "nbest/dev.jsonl"
NBEST_EVAL = "nbest/eval.jsonl"
WEIGHTS = "weights/weights.json"
REPORT_JSON = "report/report.json"
REPORT_TXT = "report/report.txt"

FT_DOMAINS = (Domain.MUSIC, Domain.NAVIGATION, Domain.SHOPPING)
DOMAIN_FLAGS = {"music": Domain.MUSIC, "nav": Domain.NAVIGATION, "navigation": Domain.NAVIGATION, "shop": Domain.SHOPPING, "shopping": Domain.SHOPPING}

SYSTEMS = ("genrl", "music", "nav", "shop", "domain", "em-baseline")
SYSTEM_MODEL = {
    "genrl": ModelChoice.GENERAL,
    "music": ModelChoice.MUSIC,
    "nav": ModelChoice.NAVIGATION,
    "shop": ModelChoice.SHOPPING,
}
SYSTEM_ROW = {
    "genrl": "LM_Genrl",
    "nav": "LM_Nav",
    "music": "LM_Music",
    "shop": "LM_Shop",
    "domain": "DomainAware",
    "em-baseline": "AdaptationBaseline",
}
ROW_ORDER = ("genrl", "nav", "music", "shop", "domain", "em-baseline")
SPLIT_ORDER = (Domain.NAVIGATION, Domain.MUSIC, Domain.SHOPPING, Domain.OTHER)
SPLIT_LABEL = {Domain.NAVIGATION: "Nav", Domain.MUSIC: "Music", Domain.SHOPPING: "Shop", Domain.OTHER: "Other"}
EM_KEY = "em-baseline"


def nlm_path(choice: ModelChoice) -> str:
    return f"models/nlm_{choice.value.lower()}.bin"


def rescore_path(system: str) -> str:
    return f"rescore/{system}.jsonl"


def eval_path(system: str) -> str:
    return f"eval/{system}.json"


# -- context --------------------------------------------------------------------------


class Context:
    def __init__(self, config: ExperimentConfig, out: str | os.PathLike | None = None, jobs: int = 1):
        self.config = config
        self.out = Path(out or config.out)
        self.jobs = max(1, int(jobs))
        self._cache: dict = {}

    def path(self, rel: str) -> Path:
        return self.out / rel

    def require(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise PipelineError(f"missing input artifact: {p}")
        return p

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def corpus(self) -> list[Utterance]:
        return self._memo("corpus", lambda: read_jsonl(self.require(CORPUS)))

    def vocab(self) -> Vocabulary:
        return self._memo("vocab", lambda: Vocabulary.from_json(json.loads(self.require(VOCAB).read_text(encoding="utf-8"))))

    def split(self, split: Split) -> list[Utterance]:
        return select(self.corpus(), split)

    def references(self, split: Split) -> dict[str, Utterance]:
        return {u.id: u for u in self.split(split)}

    def ngram(self) -> NGramModel:
        return self._memo("ngram", lambda: NGramModel.load(self.require(NGRAM), self.vocab()))

    def nlm(self, choice: ModelChoice) -> NeuralLM:
        return self._memo(("nlm", choice), lambda: NeuralLM.load(self.require(nlm_path(choice)), self.vocab()))

    def bank(self) -> dict[ModelChoice, NeuralLM]:
        return {c: self.nlm(c) for c in ModelChoice}

    def classifier(self) -> DomainClassifier:
        return self._memo("clf", lambda: DomainClassifier.load(self.require(CLASSIFIER), self.vocab()))

    def nbest(self, split: Split) -> list[NBestList]:
        rel = NBEST_DEV if split is Split.DEV else NBEST_EVAL
        return self._memo(("nbest", split), lambda: read_nbest(self.require(rel)))

    def weights(self) -> dict:
        return self._memo("weights", lambda: json.loads(self.require(WEIGHTS).read_text(encoding="utf-8")))

    def rescore_config(self, key: str) -> RescoreConfig:
        w = self.weights()[key]
        return RescoreConfig(w["best_lambda"], w["best_gamma"], self.config.rescore.unk_scale)


# -- parallel helpers ---------------------------------------------------------------


def _chunks(items: Sequence, n: int) -> list[Sequence]:
    size = max(1, math.ceil(len(items) / n))
    return [items[i : i + size] for i in range(0, len(items), size)]


def _simulate_chunk(args):
    refs, vocab, channel_cfg, ngram, counts = args
    ch = Channel(vocab, channel_cfg, counts)
    return [simulate_nbest(u, ch, ngram) for u in refs]


def _score_chunk(args):
    nbests, model, unk_scale = args
    return [second_pass_scores(build_lattice(nb), model, unk_scale) for nb in nbests]


def _mixture_chunk(args):
    nbests, models, em_cfg, unk_scale = args
    out = []
    for nb in nbests:
        w = em_weights(nb, models, em_cfg)
        out.append((w, second_pass_scores(build_lattice(nb), MixtureLM(models, w), unk_scale)))
    return out


def pmap(fn: Callable, items: Sequence, jobs: int, *extra) -> list:
    """Order-preserving chunked map; runs inline when ``jobs == 1``."""
    if jobs <= 1 or len(items) < 2:
        return fn((items, *extra))
    parts = _chunks(list(items), jobs)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(fn, [(p, *extra) for p in parts]))
    return [x for r in results for x in r]


def score_table(ctx: Context, nbests, model) -> list[np.ndarray]:
    return pmap(_score_chunk, nbests, ctx.jobs, model, ctx.config.rescore.unk_scale)


def mixture_table(ctx: Context, nbests) -> list[tuple[np.ndarray, np.ndarray]]:
    models = [ctx.nlm(c) for c in ModelChoice]
    return pmap(_mixture_chunk, nbests, ctx.jobs, models, ctx.config.em, ctx.config.rescore.unk_scale)


# -- stages ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    sections: tuple[str, ...]
    run: Callable[[Context, int], None]


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _stage_corpus(ctx: Context, seed: int) -> None:
    cfg = ctx.config
    gen = replace(cfg.generator, seed=seed)
    corpus = split_corpus(generate_corpus(gen), subseed(cfg.seed, "split"), cfg.split_ratios)
    vocab = build_vocabulary(select(corpus, Split.TRAIN), cfg.vocab_cap)
    write_jsonl(ctx.path(CORPUS), corpus)
    _write_json(ctx.path(VOCAB), vocab.to_json())


def _stage_ngram(ctx: Context, seed: int) -> None:
    cfg = ctx.config
    model = train_kneser_ney(ctx.split(Split.TRAIN), ctx.vocab(), cfg.ngram_order, cfg.ngram_discount)
    model.save(ctx.path(NGRAM))


def _history_path(choice: ModelChoice) -> str:
    return f"models/nlm_{choice.value.lower()}.history.json"


def _stage_nlm_general(ctx: Context, seed: int) -> None:
    conf = replace(ctx.config.nlm, seed=seed)
    model, hist = train_general(ctx.split(Split.TRAIN), ctx.split(Split.DEV), ctx.vocab(), conf)
    model.save(ctx.path(nlm_path(ModelChoice.GENERAL)))
    _write_json(ctx.path(_history_path(ModelChoice.GENERAL)), hist.to_json())


def _stage_finetune(domain: Domain):
    choice = ModelChoice(domain.value)

    def run(ctx: Context, seed: int) -> None:
        conf = replace(ctx.config.finetune, seed=seed)
        general = ctx.nlm(ModelChoice.GENERAL)
        train = select(ctx.corpus(), Split.TRAIN, domain)
        dev = select(ctx.corpus(), Split.DEV, domain)
        model, hist = finetune(general, train, dev, ctx.config.nlm, conf)
        model.save(ctx.path(nlm_path(choice)))
        _write_json(ctx.path(_history_path(choice)), hist.to_json())

    return run


def _stage_classifier(ctx: Context, seed: int) -> None:
    conf = replace(ctx.config.classifier, seed=seed)
    model, hist = train_classifier(ctx.split(Split.TRAIN), ctx.split(Split.DEV), ctx.vocab(), conf)
    model.save(ctx.path(CLASSIFIER))
    report = evaluate_classifier(model, ctx.split(Split.EVAL), ctx.config.rescore.threshold)
    report["dev_loss"] = hist
    _write_json(ctx.path(CLASSIFIER_REPORT), report)


def _stage_nbest(ctx: Context, seed: int) -> None:
    ch = replace(ctx.config.channel, seed=seed)
    counts = unigram_counts(ctx.split(Split.TRAIN))
    for split, rel in ((Split.DEV, NBEST_DEV), (Split.EVAL, NBEST_EVAL)):
        lists = pmap(_simulate_chunk, ctx.split(split), ctx.jobs, ctx.vocab(), ch, ctx.ngram(), counts)
        write_nbest(ctx.path(rel), lists)


def _sa(ctx: Context, seed: int, key: str, nbests, table, refs) -> dict:
    sa = replace(ctx.config.sa, seed=subseed(seed, key))
    objective = RescoringObjective(nbests, table, refs, sa.objective)
    result = sa_optimize(objective, sa)
    rep = result.report(sa.objective)
    rep["dev_utterances"] = len(nbests)
    log.info("weights %s: lam=%.3f gamma=%.3f %s=%.3f", key, result.best_point[0], result.best_point[1], sa.objective, result.best_value)
    return rep


def routed_key(choice: ModelChoice) -> str:
    """Weights key used by the domain-aware system for a routed domain model."""
    return f"routed:{choice.value}"


def route_onebest(ctx: Context, nbests: Sequence[NBestList]) -> list[ModelChoice]:
    clf = ctx.classifier()
    policy = RoutingPolicy(ctx.config.rescore.threshold)
    post = clf.posteriors_batch([nb.hyps[0].tokens for nb in nbests])
    return [route(p, policy) for p in post]


def _stage_weights(ctx: Context, seed: int) -> None:
    """SA-tune (lam, gamma) per rescoring model on dev.

    The general model and the EM mixture are tuned on the whole dev set;
    each domain model on its own domain's dev utterances.  For the
    domain-aware system every domain model is tuned again on the dev
    utterances the classifier routes to it, so its weights reflect the
    traffic it actually sees (misroutes included).  Utterances routed to
    the general model reuse the general weights.
    """
    nbests = ctx.nbest(Split.DEV)
    refs = ctx.references(Split.DEV)
    ref_list = [refs[nb.id] for nb in nbests]
    routed = route_onebest(ctx, nbests)
    out = {}
    for choice in ModelChoice:
        table = score_table(ctx, nbests, ctx.nlm(choice))

        def tune(key, idx):
            out[key] = _sa(ctx, seed, key, [nbests[i] for i in idx], [table[i] for i in idx], [ref_list[i] for i in idx])

        if choice is ModelChoice.GENERAL:
            tune(choice.value, range(len(nbests)))
            continue
        tune(choice.value, [i for i, r in enumerate(ref_list) if r.domain.value == choice.value])
        idx = [i for i, c in enumerate(routed) if c is choice]
        if idx:
            tune(routed_key(choice), idx)
        else:
            out[routed_key(choice)] = dict(out[choice.value], dev_utterances=0)
    mix = mixture_table(ctx, nbests)
    out[EM_KEY] = _sa(ctx, seed, EM_KEY, nbests, [sp for _, sp in mix], ref_list)
    _write_json(ctx.path(WEIGHTS), out)


def _stage_rescore(system: str):
    def run(ctx: Context, seed: int) -> None:
        nbests = ctx.nbest(Split.EVAL)
        results: list[RescoreResult] = []
        if system in SYSTEM_MODEL:
            choice = SYSTEM_MODEL[system]
            cfg = ctx.rescore_config(choice.value)
            table = score_table(ctx, nbests, ctx.nlm(choice))
            for nb, sp in zip(nbests, table):
                results.append(RescoreResult(nb.id, system, choice.value, rank(nb, sp, cfg)))
        elif system == "domain":
            choices = route_onebest(ctx, nbests)
            tables = {}
            for c in ModelChoice:
                sel = [nb for nb, ch in zip(nbests, choices) if ch is c]
                tables[c] = iter(score_table(ctx, sel, ctx.nlm(c)) if sel else [])
            for nb, c in zip(nbests, choices):
                cfg = ctx.rescore_config(c.value if c is ModelChoice.GENERAL else routed_key(c))
                results.append(RescoreResult(nb.id, system, c.value, rank(nb, next(tables[c]), cfg)))
        elif system == "em-baseline":
            cfg = ctx.rescore_config(EM_KEY)
            for nb, (w, sp) in zip(nbests, mixture_table(ctx, nbests)):
                results.append(RescoreResult(nb.id, system, "Mixture", rank(nb, sp, cfg), tuple(float(x) for x in w)))
        else:
            raise PipelineError(f"unknown system {system!r}")
        write_results(ctx.path(rescore_path(system)), results)

    return run


def _breakdowns(refs: dict[str, Utterance], hyps: dict[str, Sequence[str]]) -> dict:
    out = {}
    for d in SPLIT_ORDER:
        ids = sorted(i for i in hyps if refs[i].domain is d)
        if not ids:
            continue
        w = corpus_wer((refs[i].tokens, hyps[i]) for i in ids)
        has_slots = any(refs[i].slots for i in ids)
        s = slot_wer((refs[i].tokens, hyps[i], refs[i].slots) for i in ids) if has_slots else None
        out[SPLIT_LABEL[d]] = {"utterances": len(ids), "wer": w.to_json(), "slot_wer": s.to_json() if s else None}
    ids = sorted(hyps)
    out["All"] = {
        "utterances": len(ids),
        "wer": corpus_wer((refs[i].tokens, hyps[i]) for i in ids).to_json(),
        "slot_wer": slot_wer((refs[i].tokens, hyps[i], refs[i].slots) for i in ids).to_json(),
    }
    return out


def _oracle_breakdowns(refs, nbests: Sequence[NBestList]) -> dict:
    out = {}
    for d in SPLIT_ORDER:
        sel = [nb for nb in nbests if refs[nb.id].domain is d]
        if sel:
            o = oracle_wer((refs[nb.id].tokens, [h.tokens for h in nb.hyps]) for nb in sel)
            out[SPLIT_LABEL[d]] = {"utterances": len(sel), "wer": o.to_json(), "slot_wer": None}
    o = oracle_wer((refs[nb.id].tokens, [h.tokens for h in nb.hyps]) for nb in nbests)
    out["All"] = {"utterances": len(nbests), "wer": o.to_json(), "slot_wer": None}
    return out


def _stage_evaluate_firstpass(ctx: Context, seed: int) -> None:
    refs = ctx.references(Split.EVAL)
    nbests = ctx.nbest(Split.EVAL)
    _write_json(
        ctx.path(eval_path("firstpass")),
        {
            "system": "firstpass",
            "splits": _breakdowns(refs, {nb.id: nb.hyps[0].tokens for nb in nbests}),
            "oracle": _oracle_breakdowns(refs, nbests),
        },
    )


def _stage_evaluate(system: str):
    def run(ctx: Context, seed: int) -> None:
        refs = ctx.references(Split.EVAL)
        rows = [json.loads(line) for line in ctx.require(rescore_path(system)).read_text(encoding="utf-8").splitlines() if line]
        hyps = {r["id"]: tuple(r["ranked"][0]["tokens"]) for r in rows}
        missing = sorted(set(refs) - set(hyps))
        if missing:
            raise PipelineError(f"{rescore_path(system)} lacks {len(missing)} eval utterances (e.g. {missing[0]})")
        obj = {"system": system, "splits": _breakdowns(refs, hyps)}
        if system == "domain":
            routing = {}
            for d in SPLIT_ORDER:
                counts = {c.value: 0 for c in ModelChoice}
                for r in rows:
                    if refs[r["id"]].domain is d:
                        counts[r["chosen_model"]] += 1
                routing[SPLIT_LABEL[d]] = counts
            obj["routing"] = routing
        _write_json(ctx.path(eval_path(system)), obj)

    return run


def _round(x, nd=4):
    return None if x is None else round(float(x), nd)


def ppl_matrix(ctx: Context) -> dict:
    ev = ctx.split(Split.EVAL)
    cols = (Domain.OTHER, Domain.NAVIGATION, Domain.MUSIC, Domain.SHOPPING)
    absolute = {}
    for c in (ModelChoice.GENERAL, ModelChoice.NAVIGATION, ModelChoice.MUSIC, ModelChoice.SHOPPING):
        m = ctx.nlm(c)
        absolute[c.value] = {SPLIT_LABEL[d]: perplexity(m, select(ev, domain=d)) for d in cols}
    base = absolute[ModelChoice.GENERAL.value]
    relative = {
        row: {col: _round(relative_delta(v, base[col]), 2) for col, v in vals.items()}
        for row, vals in absolute.items()
        if row != ModelChoice.GENERAL.value
    }
    return {
        "columns": [SPLIT_LABEL[d] for d in cols],
        "absolute": {row: {col: _round(v, 3) for col, v in vals.items()} for row, vals in absolute.items()},
        "relative_percent": relative,
    }


def _cell(ev: dict, fp: dict, gen: dict | None, split: str) -> dict:
    cur = ev[split]
    w = cur["wer"]["wer"]
    fw = fp[split]["wer"]["wer"]
    cell = {"wer": _round(100 * w), "wer_delta_vs_firstpass": _round(relative_delta(w, fw), 2) if fw > 0 else None}
    if gen is not None:
        gw = gen[split]["wer"]["wer"]
        cell["wer_delta_vs_genrl"] = _round(relative_delta(w, gw), 2) if gw > 0 else None
    if cur.get("slot_wer") is not None:
        s = cur["slot_wer"]["wer"]
        fs = fp[split]["slot_wer"]["wer"]
        cell["slot_wer"] = _round(100 * s)
        cell["slot_wer_delta_vs_firstpass"] = _round(relative_delta(s, fs), 2) if fs > 0 else None
        if gen is not None and gen[split].get("slot_wer") is not None:
            gs = gen[split]["slot_wer"]["wer"]
            cell["slot_wer_delta_vs_genrl"] = _round(relative_delta(s, gs), 2) if gs > 0 else None
    return cell


def wer_table(ctx: Context) -> dict:
    fp_obj = json.loads(ctx.require(eval_path("firstpass")).read_text(encoding="utf-8"))
    fp = fp_obj["splits"]
    evals = {s: json.loads(ctx.require(eval_path(s)).read_text(encoding="utf-8")) for s in SYSTEMS}
    gen = evals["genrl"]["splits"]
    columns = [SPLIT_LABEL[d] for d in SPLIT_ORDER] + ["All"]
    rows = {"FirstPass": {c: {"wer": _round(100 * fp[c]["wer"]["wer"]), "slot_wer": _round(100 * fp[c]["slot_wer"]["wer"]) if fp[c]["slot_wer"] else None} for c in columns}}
    for s in ROW_ORDER:
        rows[SYSTEM_ROW[s]] = {c: _cell(evals[s]["splits"], fp, None if s == "genrl" else gen, c) for c in columns}
    rows["Oracle"] = {c: _cell(fp_obj["oracle"], fp, gen, c) for c in columns}
    return {
        "columns": columns,
        "row_order": ["FirstPass"] + [SYSTEM_ROW[s] for s in ROW_ORDER] + ["Oracle"],
        "rows": rows,
        "routing": evals["domain"].get("routing", {}),
        "counts": {s: evals[s]["splits"] for s in SYSTEMS} | {"firstpass": fp, "oracle": fp_obj["oracle"]},
    }


def classifier_table(ctx: Context) -> dict:
    rep = json.loads(ctx.require(CLASSIFIER_REPORT).read_text(encoding="utf-8"))
    refs = ctx.references(Split.EVAL)
    nbests = ctx.nbest(Split.EVAL)
    onebest = evaluate_classifier(
        ctx.classifier(), [refs[nb.id] for nb in nbests], ctx.config.rescore.threshold, tokens=[nb.hyps[0].tokens for nb in nbests]
    )
    keep = ("accuracy", "routed_accuracy", "per_class", "confusion", "routed_confusion", "threshold", "classes")
    return {"reference_text": {k: rep[k] for k in keep}, "firstpass_onebest": {k: onebest[k] for k in keep}}


def _weights_summary(ctx: Context) -> dict:
    return {
        k: {"lambda": v["best_lambda"], "gamma": v["best_gamma"], "objective": v["objective"], "dev_value": _round(v["best_wer"])}
        for k, v in ctx.weights().items()
    }


def render_text(report: dict) -> str:
    lines = []
    ppl = report["ppl"]
    lines.append("Relative PPL vs the general NLM (%)")
    lines.append(f"{'':12s}" + "".join(f"{c:>10s}" for c in ppl["columns"]))
    g = ppl["absolute"]["General"]
    lines.append(f"{'Genrl (PPL)':12s}" + "".join(f"{g[c]:10.2f}" for c in ppl["columns"]))
    for row in ("Navigation", "Music", "Shopping"):
        vals = ppl["relative_percent"][row]
        lines.append(f"{row:12s}" + "".join(f"{vals[c]:+10.1f}" for c in ppl["columns"]))
    lines.append("")
    clf = report["classifier"]
    for title, key in (("Classifier on reference text", "reference_text"), ("Classifier on first-pass one-best", "firstpass_onebest")):
        r = clf[key]
        lines.append(f"{title}: accuracy {100 * r['accuracy']:.2f}%, routed (tau={r['threshold']}) {100 * r['routed_accuracy']:.2f}%")
        lines.append(f"{'':12s}{'precision':>10s}{'recall':>10s}")
        for cls in r["classes"]:
            pr = r["per_class"][cls]
            lines.append(f"{cls:12s}{100 * pr['precision']:10.2f}{100 * pr['recall']:10.2f}")
        lines.append("")
    t = report["wer"]
    for metric, title in (("wer", "WER % (relative change vs first pass)"), ("slot_wer", "SlotWER % (relative change vs first pass)")):
        lines.append(title)
        lines.append(f"{'':20s}" + "".join(f"{c:>18s}" for c in t["columns"]))
        for row in t["row_order"]:
            cells = []
            for c in t["columns"]:
                cell = t["rows"][row][c]
                v = cell.get(metric)
                d = cell.get(f"{metric}_delta_vs_firstpass")
                if v is None:
                    cells.append(f"{'-':>18s}")
                elif d is None:
                    cells.append(f"{v:18.2f}")
                else:
                    cells.append(f"{v:9.2f} ({d:+6.1f})")
            lines.append(f"{row:20s}" + "".join(cells))
        lines.append("")
    lines.append("Second-pass weights (lambda, gamma) tuned on dev")
    for k, v in report["weights"].items():
        lines.append(f"  {k:20s} lambda={v['lambda']:.3f} gamma={v['gamma']:.3f} dev {v['objective']}={v['dev_value']:.2f}")
    return "\n".join(lines) + "\n"


def _stage_report(ctx: Context, seed: int) -> None:
    report = {
        "ppl": ppl_matrix(ctx),
        "classifier": classifier_table(ctx),
        "wer": wer_table(ctx),
        "weights": _weights_summary(ctx),
    }
    _write_json(ctx.path(REPORT_JSON), report)
    ctx.path(REPORT_TXT).write_text(render_text(report), encoding="utf-8")


def _ft_stage(d: Domain) -> Stage:
    c = ModelChoice(d.value)
    return Stage(
        f"finetune-{d.value.lower()}",
        (CORPUS, VOCAB, nlm_path(ModelChoice.GENERAL)),
        (nlm_path(c), _history_path(c)),
        ("nlm", "finetune"),
        _stage_finetune(d),
    )


ALL_NLMS = tuple(nlm_path(c) for c in ModelChoice)


def _rescore_stage(system: str) -> Stage:
    inputs = (VOCAB, NBEST_EVAL, WEIGHTS)
    if system in SYSTEM_MODEL:
        inputs += (nlm_path(SYSTEM_MODEL[system]),)
        sections = ("rescore",)
    elif system == "domain":
        inputs += ALL_NLMS + (CLASSIFIER,)
        sections = ("rescore",)
    else:
        inputs += ALL_NLMS
        sections = ("rescore", "em")
    return Stage(f"rescore-{system}", inputs, (rescore_path(system),), sections, _stage_rescore(system))


def build_stages() -> list[Stage]:
    stages = [
        Stage("gen-corpus", (), (CORPUS, VOCAB), ("generator", "vocab_cap", "split"), _stage_corpus),
        Stage("train-ngram", (CORPUS, VOCAB), (NGRAM,), ("ngram",), _stage_ngram),
        Stage(
            "train-nlm",
            (CORPUS, VOCAB),
            (nlm_path(ModelChoice.GENERAL), _history_path(ModelChoice.GENERAL)),
            ("nlm",),
            _stage_nlm_general,
        ),
        *[_ft_stage(d) for d in FT_DOMAINS],
        Stage("train-classifier", (CORPUS, VOCAB), (CLASSIFIER, CLASSIFIER_REPORT), ("classifier", "rescore"), _stage_classifier),
        Stage("simulate-nbest", (CORPUS, VOCAB, NGRAM), (NBEST_DEV, NBEST_EVAL), ("channel",), _stage_nbest),
        Stage("optimize-weights", (CORPUS, VOCAB, NBEST_DEV, CLASSIFIER) + ALL_NLMS, (WEIGHTS,), ("rescore", "sa", "em"), _stage_weights),
        *[_rescore_stage(s) for s in SYSTEMS],
        Stage("evaluate-firstpass", (CORPUS, NBEST_EVAL), (eval_path("firstpass"),), (), _stage_evaluate_firstpass),
        *[Stage(f"evaluate-{s}", (CORPUS, rescore_path(s)), (eval_path(s),), (), _stage_evaluate(s)) for s in SYSTEMS],
        Stage(
            "report",
            (CORPUS, VOCAB, CLASSIFIER, CLASSIFIER_REPORT, NBEST_EVAL, WEIGHTS, eval_path("firstpass"))
            + ALL_NLMS
            + tuple(eval_path(s) for s in SYSTEMS),
            (REPORT_JSON, REPORT_TXT),
            ("rescore",),
            _stage_report,
        ),
    ]
    return stages


STAGES = {s.name: s for s in build_stages()}


# -- manifests ------------------------------------------------------------------------


def manifest_path(ctx: Context, stage: Stage) -> Path:
    return ctx.path(f"manifests/{stage.name}.json")


def config_hash(config: ExperimentConfig, stage: Stage) -> str:
    part = {"seed": config.seed, **{k: config.raw[k] for k in stage.sections}}
    return hashlib.sha256(canonical(part).encode("utf-8")).hexdigest()


def _hashes(ctx: Context, rels: Sequence[str]) -> dict[str, str]:
    return {rel: sha256_file(ctx.path(rel)) for rel in rels}


def verify_manifest(ctx: Context, stage: Stage, check_config: bool = True) -> list[str]:
    """Problems with a stage's manifest; empty when it verifies."""
    mp = manifest_path(ctx, stage)
    if not mp.exists():
        return [f"{stage.name}: no manifest"]
    m = json.loads(mp.read_text(encoding="utf-8"))
    problems = []
    if check_config and m.get("config_hash") != config_hash(ctx.config, stage):
        problems.append(f"{stage.name}: config changed since the artifact was built")
    for kind in ("inputs", "outputs"):
        for rel, digest in m.get(kind, {}).items():
            p = ctx.path(rel)
            if not p.exists():
                problems.append(f"{stage.name}: {kind[:-1]} {rel} is missing")
            elif sha256_file(p) != digest:
                problems.append(f"{stage.name}: {kind[:-1]} {rel} does not match its recorded hash")
    if sorted(m.get("outputs", {})) != sorted(stage.outputs):
        problems.append(f"{stage.name}: manifest lists unexpected outputs")
    return problems


def run_stage(ctx: Context, name: str) -> None:
    stage = STAGES[name]
    for rel in stage.inputs:
        ctx.require(rel)
    existing = [rel for rel in stage.outputs if ctx.path(rel).exists()]
    if existing or manifest_path(ctx, stage).exists():
        raise PipelineError(f"{name}: refusing to overwrite existing artifact {ctx.path(existing[0]) if existing else manifest_path(ctx, stage)}")
    for rel in stage.outputs:
        ctx.path(rel).parent.mkdir(parents=True, exist_ok=True)
    manifest_path(ctx, stage).parent.mkdir(parents=True, exist_ok=True)
    seed = subseed(ctx.config.seed, name)
    inputs = _hashes(ctx, stage.inputs)
    log.info("running %s", name)
    stage.run(ctx, seed)
    manifest = {
        "stage": name,
        "package_version": __version__,
        "config_hash": config_hash(ctx.config, stage),
        "seed": seed,
        "inputs": inputs,
        "outputs": _hashes(ctx, stage.outputs),
    }
    _write_json(manifest_path(ctx, stage), manifest)


def run_all(ctx: Context) -> list[str]:
    """Run every stage in order, skipping those whose manifest verifies."""
    ran = []
    for stage in build_stages():
        if manifest_path(ctx, stage).exists():
            problems = verify_manifest(ctx, stage)
            if not problems:
                log.info("%s is up to date", stage.name)
                continue
            raise PipelineError("; ".join(problems) + " (use a fresh --out directory)")
        run_stage(ctx, stage.name)
        ran.append(stage.name)
    return ran


def verify_all(ctx: Context) -> list[str]:
    problems = []
    for stage in build_stages():
        if manifest_path(ctx, stage).exists():
            problems += verify_manifest(ctx, stage, check_config=False)
    return problems
