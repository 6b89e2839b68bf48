"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def ctc_forward_backward(logp, ext):
    T, S = logp.shape[0], ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    emit = logp[:, ext]  # (T, S)
    # skip transitions s-2 -> s are allowed into non-blank labels that differ from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha[0, : min(S, 2)] = emit[0, : min(S, 2)]
    for t in range(1, T):
        prev = alpha[t - 1]
        cand = np.full((3, S), -np.inf)
        cand[0] = prev
        cand[1, 1:] = prev[:-1]
        cand[2, 2:] = np.where(skip[2:], prev[:-2], -np.inf)
        alpha[t] = _lse(cand) + emit[t]

    beta[T - 1, max(0, S - 2):] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        cand = np.full((3, S), -np.inf)
        cand[0] = nxt
        cand[1, :-1] = nxt[1:]
        cand[2, :-2] = np.where(skip[2:], nxt[2:], -np.inf)
        beta[t] = _lse(cand)
    return alpha, beta


def _lse(cand):
    m = cand.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(cand - safe).sum(axis=0))


def edit_distance(a, b):
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != b[j - 1]))
        prev = cur
    return prev[m]
