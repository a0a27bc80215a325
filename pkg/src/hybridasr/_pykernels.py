"""Pure-Python/NumPy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def _lse(a, b):
    return np.logaddexp(a, b)


def ctc_forward_backward(log_probs, target, blank):
    """Negative log-likelihood of ``target`` under CTC and its gradient.

    ``log_probs`` is (T, C); returns ``(nll, grad)`` with ``grad`` the
    derivative of the nll w.r.t. ``log_probs``.
    """
    lp = np.asarray(log_probs)
    lp = lp.astype(np.promote_types(lp.dtype, np.float64), copy=False)
    tgt = np.asarray(target, dtype=np.int64)
    T, C = lp.shape
    U = len(tgt)
    if U == 0:
        raise ValueError("empty CTC target")
    need = U + int(np.sum(tgt[1:] == tgt[:-1]))
    if T < need:
        raise ValueError(f"CTC target of length {U} needs {need} frames, got {T}")

    S = 2 * U + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = tgt
    # transitions s-2 -> s allowed only onto a label that differs from the one two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]

    alpha = np.full((T, S), -np.inf, dtype=lp.dtype)
    alpha[0, :2] = emit[0, :2]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = _lse(acc[1:], prev[:-1])
            acc[2:] = np.where(skip[2:], _lse(acc[2:], prev[:-2]), acc[2:])
            alpha[t] = np.where(acc == -np.inf, -np.inf, acc + emit[t])

        beta = np.full((T, S), -np.inf, dtype=lp.dtype)
        beta[T - 1, S - 2:] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            acc = nxt.copy()
            acc[:-1] = _lse(acc[:-1], nxt[1:])
            acc[:-2] = np.where(skip[2:], _lse(acc[:-2], nxt[2:]), acc[:-2])
            beta[t] = acc

    logp = _lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if logp == -np.inf:
        raise ValueError("CTC target has zero probability")
    occ = alpha + beta
    gamma = np.full((T, C), -np.inf, dtype=lp.dtype)
    for s in range(S):
        gamma[:, ext[s]] = _lse(gamma[:, ext[s]], occ[:, s])
    grad = -np.exp(gamma - logp)
    return -logp, grad


def depthwise_forward(x, w, valid, center):
    """y[b,i,c] = sum_k w[c,k] * x[b,i+k-center,c] * valid[k,b,i], taps in index order."""
    B, N, C = x.shape
    K = w.shape[1]
    y = np.zeros_like(x)
    for k in range(K):
        off = k - center
        lo, hi = max(0, -off), min(N, N - off)
        if lo >= hi:
            continue
        v = valid[k, :, lo:hi, None]
        y[:, lo:hi] += w[:, k] * x[:, lo + off:hi + off] * v
    return y


def depthwise_backward(g, x, w, valid, center):
    """Gradients of ``depthwise_forward`` w.r.t. x and w."""
    B, N, C = x.shape
    K = w.shape[1]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for k in range(K):
        off = k - center
        lo, hi = max(0, -off), min(N, N - off)
        if lo >= hi:
            continue
        gv = g[:, lo:hi] * valid[k, :, lo:hi, None]
        dx[:, lo + off:hi + off] += w[:, k] * gv
        dw[:, k] = np.einsum("bnc,bnc->c", gv, x[:, lo + off:hi + off])
    return dx, dw


def edit_distance(a, b):
    """Levenshtein distance between two integer sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, ra in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, hb in enumerate(b, 1):
            cur[j] = min(prev[j - 1] + (ra != hb), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]
