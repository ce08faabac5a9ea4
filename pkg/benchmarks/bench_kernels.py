"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Inputs are drawn to look like the pipeline's: word-id sequences of 4-12
tokens, vocabulary-sized character-distance rows, and channel Viterbi
tables for 10-token utterances.  Every pair of results is also checked
for agreement before timing.
"""

import argparse
import json
import sys
import time

import numpy as np

from domainrescore import _kernels_py

try:
    from domainrescore import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _word_pairs(rng, n):
    out = []
    for _ in range(n):
        a = rng.integers(0, 30, size=rng.integers(4, 13))
        b = a.copy()
        k = rng.integers(0, 4)
        for _ in range(k):
            b[rng.integers(len(b))] = rng.integers(0, 30)
        out.append((a.tolist(), b.tolist()))
    return out


def _pool(rng, n):
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    return ["".join(rng.choice(letters, size=rng.integers(3, 10))) for _ in range(n)]


def _viterbi_cases(rng, n):
    cases = []
    for _ in range(n):
        src = rng.integers(0, 12, size=10).tolist()
        obs = rng.integers(0, 12, size=rng.integers(8, 13)).tolist()
        sub = np.log(rng.uniform(1e-4, 0.05, size=(len(src), len(obs))))
        ins = np.log(rng.uniform(1e-5, 1e-3, size=len(obs)))
        cases.append((src, obs, sub, np.log(0.89), np.log(0.03), ins))
    return cases


def workloads(seed=0):
    rng = np.random.default_rng(seed)
    pairs = _word_pairs(rng, 2000)
    pool = _pool(rng, 2000)
    words = _pool(rng, 20)
    vit = _viterbi_cases(rng, 300)
    return {
        "edit_distance x2000": lambda k: [k.edit_distance(a, b) for a, b in pairs],
        "align_ops x2000": lambda k: [k.align_ops(a, b).tolist() for a, b in pairs],
        "char_distance_row 20x2000": lambda k: [k.char_distance_row(w, pool).tolist() for w in words],
        "channel_viterbi x300": lambda k: [k.channel_viterbi(*c) for c in vit],
    }


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the timings here")
    args = p.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; run: python3 setup.py build_ext --inplace", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':28s}{'python s':>11s}{'cython s':>11s}{'speedup':>9s}")
    for name, run in workloads().items():
        ref, got = run(_kernels_py), run(_kernels_c)
        flat = lambda xs: np.concatenate([np.ravel(np.asarray(x, dtype=float)) for x in xs])
        if len(ref) != len(got) or not np.allclose(flat(ref), flat(got), rtol=0, atol=1e-9):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        tp = best_time(lambda: run(_kernels_py), args.repeat)
        tc = best_time(lambda: run(_kernels_c), args.repeat)
        rows.append({"kernel": name, "python_s": tp, "cython_s": tc, "speedup": tp / tc})
        print(f"{name:28s}{tp:11.4f}{tc:11.4f}{tp / tc:8.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
