# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics must match ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline double _lse(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_forward_backward(log_probs, target, int blank):
    """Negative log-likelihood of ``target`` under CTC and its gradient.

    ``log_probs`` is (T, C) float64; returns ``(nll, grad)`` where ``grad`` is
    d nll / d log_probs. Raises ValueError if the target cannot fit in T frames.
    """
    cdef double[:, ::1] lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    cdef long[::1] tgt = np.ascontiguousarray(target, dtype=np.int64)
    cdef Py_ssize_t T = lp.shape[0], C = lp.shape[1], U = tgt.shape[0]
    cdef Py_ssize_t S = 2 * U + 1, t, s, need = U
    if U == 0:
        raise ValueError("empty CTC target")
    for s in range(1, U):
        if tgt[s] == tgt[s - 1]:
            need += 1
    if T < need:
        raise ValueError(f"CTC target of length {U} needs {need} frames, got {T}")

    ext_np = np.full(S, blank, dtype=np.int64)
    ext_np[1::2] = np.asarray(tgt)
    cdef long[::1] ext = ext_np
    alpha_np = np.full((T, S), -np.inf)
    beta_np = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    cdef double acc, logp
    grad_np = np.zeros((T, C))
    cdef double[:, ::1] grad = grad_np
    gamma_np = np.full((T, C), -np.inf)
    cdef double[:, ::1] gamma = gamma_np

    with nogil:
        alpha[0, 0] = lp[0, ext[0]]
        alpha[0, 1] = lp[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                acc = alpha[t - 1, s]
                if s >= 1:
                    acc = _lse(acc, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                    acc = _lse(acc, alpha[t - 1, s - 2])
                if acc != -INFINITY:
                    alpha[t, s] = acc + lp[t, ext[s]]

        beta[T - 1, S - 1] = 0.0
        beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(S):
                acc = beta[t + 1, s] + lp[t + 1, ext[s]]
                if s + 1 < S:
                    acc = _lse(acc, beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
                if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                    acc = _lse(acc, beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
                beta[t, s] = acc

        logp = _lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
        for t in range(T):
            for s in range(S):
                gamma[t, ext[s]] = _lse(gamma[t, ext[s]], alpha[t, s] + beta[t, s])
            for s in range(C):
                if gamma[t, s] != -INFINITY:
                    grad[t, s] = -exp(gamma[t, s] - logp)

    if logp == -INFINITY:
        raise ValueError("CTC target has zero probability")
    return -logp, grad_np


def depthwise_forward(real[:, :, ::1] x, real[:, ::1] w, real[:, :, ::1] valid, int center):
    """y[b,i,c] = sum_k w[c,k] * x[b,i+k-center,c] * valid[k,b,i], taps in index order."""
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], C = x.shape[2], K = w.shape[1]
    cdef Py_ssize_t b, i, c, k, j
    cdef real v
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, N, C), dtype=dtype)
    cdef real[:, :, ::1] y = out
    with nogil:
        for b in range(B):
            for i in range(N):
                for k in range(K):
                    v = valid[k, b, i]
                    j = i + k - center
                    if v == 0 or j < 0 or j >= N:
                        continue
                    for c in range(C):
                        y[b, i, c] = y[b, i, c] + w[c, k] * x[b, j, c] * v
    return out


def depthwise_backward(real[:, :, ::1] g, real[:, :, ::1] x, real[:, ::1] w,
                       real[:, :, ::1] valid, int center):
    """Gradients of ``depthwise_forward`` w.r.t. x and w."""
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], C = x.shape[2], K = w.shape[1]
    cdef Py_ssize_t b, i, c, k, j
    cdef real v
    dtype = np.float32 if real is float else np.float64
    dx_np = np.zeros((B, N, C), dtype=dtype)
    dw_np = np.zeros((C, K), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_np
    cdef real[:, ::1] dw = dw_np
    with nogil:
        for b in range(B):
            for i in range(N):
                for k in range(K):
                    v = valid[k, b, i]
                    j = i + k - center
                    if v == 0 or j < 0 or j >= N:
                        continue
                    for c in range(C):
                        dx[b, j, c] = dx[b, j, c] + w[c, k] * g[b, i, c] * v
                        dw[c, k] = dw[c, k] + g[b, i, c] * x[b, j, c] * v
    return dx_np, dw_np


def edit_distance(a, b):
    """Levenshtein distance between two integer sequences."""
    cdef long[::1] r = np.ascontiguousarray(a, dtype=np.int64)
    cdef long[::1] h = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = r.shape[0], m = h.shape[0], i, j
    cdef long[::1] prev = np.arange(m + 1, dtype=np.int64)
    cdef long[::1] cur = np.zeros(m + 1, dtype=np.int64)
    cdef long best, cand
    with nogil:
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                best = prev[j - 1] + (0 if r[i - 1] == h[j - 1] else 1)
                cand = prev[j] + 1
                if cand < best:
                    best = cand
                cand = cur[j - 1] + 1
                if cand < best:
                    best = cand
                cur[j] = best
            for j in range(m + 1):
                prev[j] = cur[j]
    return int(prev[m])
