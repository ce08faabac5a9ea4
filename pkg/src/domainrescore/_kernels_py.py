"""Pure-Python dynamic-programming kernels.

Reference implementations of the routines in ``_kernels.pyx``.  They are
used when the compiled extension is unavailable and serve as the oracle the
compiled versions are tested against.
"""

import math

import numpy as np

MATCH, SUB, DEL, INS = 0, 1, 2, 3


def edit_distance(a, b):
    """Unit-cost Levenshtein distance between two integer sequences."""
    a, b = list(a), list(b)
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev = cur
    return prev[m]


def align_ops(ref, hyp):
    """Minimal unit-cost edit script from ``ref`` to ``hyp``.

    Returns an int8 array of op codes (MATCH, SUB, DEL, INS) in reference
    order.  Backtrace prefers Match > Substitute > Delete > Insert.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, up = d[i], d[i - 1]
        for j in range(1, m + 1):
            best = up[j - 1] + (0 if ri == hyp[j - 1] else 1)
            if up[j] + 1 < best:
                best = up[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        cur = d[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i - 1][j - 1] == cur:
            ops.append(MATCH)
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and d[i - 1][j - 1] + 1 == cur:
            ops.append(SUB)
            i -= 1
            j -= 1
        elif i > 0 and d[i - 1][j] + 1 == cur:
            ops.append(DEL)
            i -= 1
        else:
            ops.append(INS)
            j -= 1
    ops.reverse()
    return np.asarray(ops, dtype=np.int8)


def char_distance(s, t):
    """Character-level Levenshtein distance between two strings."""
    return edit_distance(s, t)


def char_distance_row(word, pool):
    """Distances from ``word`` to every string in ``pool`` (int64 array)."""
    return np.array([edit_distance(word, p) for p in pool], dtype=np.int64)


def channel_viterbi(src, obs, sub_logp, log_match, log_del, ins_logp):
    """Best edit-script log-probability of producing ``obs`` from ``src``.

    ``sub_logp[i, j]`` is the log-probability of substituting ``src[i]`` by
    ``obs[j]`` (including the substitution rate); it is ignored where the
    tokens are equal, which are scored with ``log_match``.  ``ins_logp[j]`` is
    the cost of inserting ``obs[j]``.  Per-slot insertion stop terms are
    constant in the script and are added by the caller.
    """
    src, obs = list(src), list(obs)
    sub_logp = np.asarray(sub_logp, dtype=np.float64).tolist()
    ins = [float(x) for x in ins_logp]
    n, m = len(src), len(obs)
    if len(ins) != m:
        raise ValueError("ins_logp must have one entry per observation token")
    ninf = -math.inf
    prev = [0.0] * (m + 1)
    for j in range(1, m + 1):
        prev[j] = prev[j - 1] + ins[j - 1]
    for i in range(1, n + 1):
        cur = [ninf] * (m + 1)
        cur[0] = prev[0] + log_del
        si = src[i - 1]
        for j in range(1, m + 1):
            if si == obs[j - 1]:
                best = prev[j - 1] + log_match
            else:
                best = prev[j - 1] + sub_logp[i - 1][j - 1]
            v = prev[j] + log_del
            if v > best:
                best = v
            v = cur[j - 1] + ins[j - 1]
            if v > best:
                best = v
            cur[j] = best
        prev = cur
    return prev[m]
