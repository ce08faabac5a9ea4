# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels.

Same contracts as ``_kernels_py``; see that module for documentation.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    MATCH = 0
    SUB = 1
    DEL = 2
    INS = 3


cdef inline long _min3(long a, long b, long c) nogil:
    if b < a:
        a = b
    if c < a:
        a = c
    return a


cdef long _lev(const long long[:] a, const long long[:] b) nogil:
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef long *prev = <long *> malloc((m + 1) * sizeof(long))
    cdef long *cur = <long *> malloc((m + 1) * sizeof(long))
    cdef long *tmp
    cdef long out
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cur[j] = _min3(prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1),
                           prev[j] + 1, cur[j - 1] + 1)
        tmp = prev
        prev = cur
        cur = tmp
    out = prev[m]
    free(prev)
    free(cur)
    return out


def _as_ids(seq):
    return np.ascontiguousarray(seq, dtype=np.int64)


def edit_distance(a, b):
    return int(_lev(_as_ids(a), _as_ids(b)))


def align_ops(ref, hyp):
    cdef const long long[:] r = _as_ids(ref)
    cdef const long long[:] h = _as_ids(hyp)
    cdef Py_ssize_t n = r.shape[0], m = h.shape[0], i, j, k
    cdef cnp.ndarray[cnp.int64_t, ndim=2] dt = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef long long[:, :] d = dt
    cdef long long cur
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = _min3(d[i - 1, j - 1] + (0 if r[i - 1] == h[j - 1] else 1),
                            d[i - 1, j] + 1, d[i, j - 1] + 1)
    out = np.empty(n + m, dtype=np.int8)
    cdef signed char[:] ops = out
    k = 0
    i = n
    j = m
    while i > 0 or j > 0:
        cur = d[i, j]
        if i > 0 and j > 0 and r[i - 1] == h[j - 1] and d[i - 1, j - 1] == cur:
            ops[k] = MATCH
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and d[i - 1, j - 1] + 1 == cur:
            ops[k] = SUB
            i -= 1
            j -= 1
        elif i > 0 and d[i - 1, j] + 1 == cur:
            ops[k] = DEL
            i -= 1
        else:
            ops[k] = INS
            j -= 1
        k += 1
    return out[:k][::-1].copy()


cdef long _char_lev(Py_UCS4 *a, Py_ssize_t n, Py_UCS4 *b, Py_ssize_t m, long *prev, long *cur) nogil:
    cdef Py_ssize_t i, j
    cdef long *tmp
    for j in range(m + 1):
        prev[j] = j
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cur[j] = _min3(prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1),
                           prev[j] + 1, cur[j - 1] + 1)
        tmp = prev
        prev = cur
        cur = tmp
    return prev[m]


cdef Py_UCS4 *_ucs4(str s, Py_ssize_t *n):
    cdef Py_ssize_t k, size = len(s)
    cdef Py_UCS4 *buf = <Py_UCS4 *> malloc((size + 1) * sizeof(Py_UCS4))
    for k in range(size):
        buf[k] = s[k]
    n[0] = size
    return buf


def char_distance(str s, str t):
    cdef Py_ssize_t n, m
    cdef Py_UCS4 *a = _ucs4(s, &n)
    cdef Py_UCS4 *b = _ucs4(t, &m)
    cdef long *prev = <long *> malloc((m + 1) * sizeof(long))
    cdef long *cur = <long *> malloc((m + 1) * sizeof(long))
    cdef long out = _char_lev(a, n, b, m, prev, cur)
    free(a); free(b); free(prev); free(cur)
    return int(out)


def char_distance_row(str word, pool):
    cdef Py_ssize_t n, m, k, size = len(pool), maxlen = 0
    cdef Py_UCS4 *a = _ucs4(word, &n)
    cdef Py_UCS4 *b
    for p in pool:
        if len(p) > maxlen:
            maxlen = len(p)
    cdef long *prev = <long *> malloc((maxlen + 1) * sizeof(long))
    cdef long *cur = <long *> malloc((maxlen + 1) * sizeof(long))
    out = np.empty(size, dtype=np.int64)
    cdef long long[:] o = out
    for k in range(size):
        b = _ucs4(pool[k], &m)
        o[k] = _char_lev(a, n, b, m, prev, cur)
        free(b)
    free(a); free(prev); free(cur)
    return out


def channel_viterbi(src, obs, sub_logp, double log_match, double log_del, ins_logp):
    cdef const long long[:] s = _as_ids(src)
    cdef const long long[:] o = _as_ids(obs)
    cdef const double[:] ins = np.ascontiguousarray(ins_logp, dtype=np.float64)
    if ins.shape[0] != o.shape[0]:
        raise ValueError("ins_logp must have one entry per observation token")
    cdef const double[:, :] sl = np.ascontiguousarray(sub_logp, dtype=np.float64).reshape(len(s), len(o))
    cdef Py_ssize_t n = s.shape[0], m = o.shape[0], i, j
    cdef double *prev = <double *> malloc((m + 1) * sizeof(double))
    cdef double *cur = <double *> malloc((m + 1) * sizeof(double))
    cdef double *tmp
    cdef double best, v, out
    prev[0] = 0.0
    for j in range(1, m + 1):
        prev[j] = prev[j - 1] + ins[j - 1]
    for i in range(1, n + 1):
        cur[0] = prev[0] + log_del
        for j in range(1, m + 1):
            if s[i - 1] == o[j - 1]:
                best = prev[j - 1] + log_match
            else:
                best = prev[j - 1] + sl[i - 1, j - 1]
            v = prev[j] + log_del
            if v > best:
                best = v
            v = cur[j - 1] + ins[j - 1]
            if v > best:
                best = v
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    out = prev[m]
    free(prev)
    free(cur)
    return out
