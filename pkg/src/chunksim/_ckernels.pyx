# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC lattice recursions and edit distance."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double _lse2(double a, double b) nogil:
    cdef double m
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    m = a if a > b else b
    return m + log(exp(a - m) + exp(b - m))


cdef inline double _lse3(double a, double b, double c) nogil:
    return _lse2(_lse2(a, b), c)


def ctc_forward_backward(double[:, ::1] logp, long[::1] ext):
    """Log-space CTC lattice.

    Returns ``(alpha, beta)`` where ``alpha[t, s]`` includes the emission at
    ``t`` and ``beta[t, s]`` covers only frames after ``t``.
    """
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t t, s
    cdef double v
    alpha_np = np.full((T, S), -np.inf)
    beta_np = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    with nogil:
        alpha[0, 0] = logp[0, ext[0]]
        if S > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                v = alpha[t - 1, s]
                if s >= 1:
                    v = _lse2(v, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                    v = _lse2(v, alpha[t - 1, s - 2])
                if v != -INFINITY:
                    alpha[t, s] = v + logp[t, ext[s]]
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(S):
                v = beta[t + 1, s] + logp[t + 1, ext[s]]
                if s + 1 < S:
                    v = _lse2(v, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
                if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                    v = _lse2(v, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
                beta[t, s] = v
    return alpha_np, beta_np


def edit_distance(long[::1] a, long[::1] b):
    """Levenshtein distance with unit costs."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef long sub, best
    prev_np = np.arange(m + 1, dtype=np.int64)
    cur_np = np.empty(m + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_np
    cdef long long[::1] cur = cur_np
    cdef long long[::1] tmp
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if sub < best:
                best = sub
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
