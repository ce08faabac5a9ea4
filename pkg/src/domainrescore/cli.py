"""Command-line front end: ``domainrescore <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as P

STAGE_COMMANDS = {
    "gen-corpus": "generate and split the synthetic corpus, build the vocabulary",
    "train-ngram": "train the first-pass Kneser-Ney model",
    "train-nlm": "train the general neural LM",
    "finetune-nlm": "fine-tune the general neural LM on one domain (--domain)",
    "train-classifier": "train the domain classifier",
    "simulate-nbest": "simulate first-pass n-best lists for dev and eval",
    "optimize-weights": "tune second-pass weights on dev with simulated annealing",
    "rescore": "rescore the eval n-best lists with one system (--system)",
    "evaluate": "score rescoring output (--system, or firstpass)",
    "report": "assemble the PPL, classifier and WER tables",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default="configs/desk.json", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-utterance work")
    p.add_argument("--threshold", type=float, default=None, help="routing threshold for the domain-aware system")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="domainrescore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in STAGE_COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name == "finetune-nlm":
            sp.add_argument("--domain", required=True, choices=sorted(P.DOMAIN_FLAGS))
        if name == "rescore":
            sp.add_argument("--system", required=True, choices=P.SYSTEMS)
        if name == "evaluate":
            sp.add_argument("--system", required=True, choices=("firstpass",) + P.SYSTEMS)
    sub.add_parser("run-all", parents=[common], help="run every stage, skipping verified artifacts")
    sub.add_parser("verify-manifests", parents=[common], help="recompute artifact hashes against their manifests")
    return parser


def stage_name(args) -> str:
    if args.command == "finetune-nlm":
        return f"finetune-{P.DOMAIN_FLAGS[args.domain].value.lower()}"
    if args.command in ("rescore", "evaluate"):
        return f"{args.command}-{args.system}"
    return args.command


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = P.load_config(args.config, seed=args.seed, out=args.out, threshold=args.threshold)
        ctx = P.Context(cfg, jobs=args.jobs)
        if args.command == "run-all":
            ran = P.run_all(ctx)
            print(f"ran {len(ran)} stage(s); report at {ctx.path(P.REPORT_TXT)}")
        elif args.command == "verify-manifests":
            problems = P.verify_all(ctx)
            for line in problems:
                print(line, file=sys.stderr)
            if problems:
                return 1
            print("all manifests verify")
        else:
            name = stage_name(args)
            P.run_stage(ctx, name)
            print(f"{name}: done")
    except (P.PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
