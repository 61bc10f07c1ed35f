"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``MMICAP_DISABLE_NUMBA`` is unset (or "0"). Both paths are always
importable under explicit names so benchmarks and tests can compare them.
"""

import os

import numpy as np

_disabled = os.environ.get("MMICAP_DISABLE_NUMBA", "0") not in ("", "0")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _disabled


# ---------------------------------------------------------------------------
# additive attention scores: s[b, i] = sum_a u[a] * tanh(vp[b, i, a] + hp[b, a])
# ---------------------------------------------------------------------------

def attention_scores_numpy(vp, hp, u):
    """Return (scores, t) where t = tanh(vp + hp[:, None, :]) is kept for backward."""
    t = np.add(vp, hp[:, None, :])
    np.tanh(t, out=t)
    return t @ u, t


def attention_scores_backward_numpy(g, t, u):
    # g: (B, N), t: (B, N, A)
    dpre = g[:, :, None] * u[None, None, :] * (1.0 - t * t)
    dhp = dpre.sum(axis=1)
    du = np.einsum("bn,bna->a", g, t)
    return dpre, dhp, du


def lcs_length_numpy(a, b):
    """Length of the longest common subsequence of two int sequences."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    b = np.asarray(b)
    prev = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        eq = b == a[i]
        cur = np.zeros(m + 1, dtype=np.int64)
        # cur[j+1] = prev[j] + 1 if equal else max(prev[j+1], cur[j])
        diag = np.where(eq, prev[:-1] + 1, 0)
        best = np.maximum(prev[1:], diag)
        # the left-dependency is a running maximum along the row
        cur[1:] = np.maximum.accumulate(best)
        prev = cur
    return int(prev[m])


if HAVE_NUMBA:

    @njit(cache=True, fastmath=False)
    def attention_scores_numba(vp, hp, u):
        B, N, A = vp.shape
        scores = np.empty((B, N))
        t = np.empty((B, N, A))
        for b in range(B):
            for i in range(N):
                acc = 0.0
                for a in range(A):
                    x = np.tanh(vp[b, i, a] + hp[b, a])
                    t[b, i, a] = x
                    acc += u[a] * x
                scores[b, i] = acc
        return scores, t

    @njit(cache=True, fastmath=False)
    def attention_scores_backward_numba(g, t, u):
        B, N, A = t.shape
        dpre = np.empty((B, N, A))
        dhp = np.zeros((B, A))
        du = np.zeros(A)
        for b in range(B):
            for i in range(N):
                gb = g[b, i]
                for a in range(A):
                    x = t[b, i, a]
                    d = gb * u[a] * (1.0 - x * x)
                    dpre[b, i, a] = d
                    dhp[b, a] += d
                    du[a] += gb * x
        return dpre, dhp, du

    @njit(cache=True)
    def lcs_length_numba(a, b):
        n = a.shape[0]
        m = b.shape[0]
        if n == 0 or m == 0:
            return 0
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            prev, cur = cur, prev
        return prev[m]

else:  # pragma: no cover
    attention_scores_numba = None
    attention_scores_backward_numba = None
    lcs_length_numba = None


# The forward stays on numpy in both modes: its SIMD tanh beats numba's
# scalar libm call by ~3x here (see benchmarks/bench_kernels.py).
_scores_fwd = attention_scores_numpy
if USE_NUMBA:
    _scores_bwd = attention_scores_backward_numba
    _lcs = lcs_length_numba
else:
    _scores_bwd = attention_scores_backward_numpy
    _lcs = lcs_length_numpy


def attention_scores(vp, hp, u):
    return _scores_fwd(np.ascontiguousarray(vp), np.ascontiguousarray(hp),
                       np.ascontiguousarray(u))


def attention_scores_backward(g, t, u):
    return _scores_bwd(np.ascontiguousarray(g), t, np.ascontiguousarray(u))


def lcs_length(a, b):
    return int(_lcs(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))


def backend():
    return "numba" if USE_NUMBA else "numpy"
