"""Differentiable forward operations.

Every op takes and returns :class:`~hybridasr.tensor.Tensor` and registers
an adjoint through :func:`~hybridasr.tensor.make_result`. Broadcasting is
limited to what the model needs: biases over the last axis, constant
masks, and per-row scaling.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_result

MASK_FILL = -1e9


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (e.g. a 0/1 mask) broadcastable to ``x``."""
    arr = np.asarray(arr, dtype=x.dtype)
    try:
        ok = np.broadcast_shapes(arr.shape, x.shape) == x.shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError(f"mul_const: {arr.shape} does not broadcast to {x.shape}")
    return make_result(x.data * arr, (x,), lambda g: (g * arr,), "mul_const")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """x (M, D) times w (M,) broadcast along rows."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: {x.shape} vs {w.shape}")
    xd, wd = x.data, w.data
    return make_result(
        xd * wd[:, None], (x, w), lambda g: (g * wd[:, None], np.sum(g * xd, axis=1)), "scale_rows"
    )


def _mm_rows(x2: np.ndarray, w: np.ndarray) -> np.ndarray:
    # a single-row product goes through gemv, whose rounding differs from gemm;
    # pad to two rows so every row is computed the same way regardless of M
    m = x2.shape[0]
    if m == 0:
        return np.zeros((0, w.shape[1]), dtype=np.result_type(x2, w))
    if m == 1:
        return (np.concatenate([x2, np.zeros_like(x2)]) @ w)[:1]
    return x2 @ w


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., K) @ w (K, N) + b (N,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = _mm_rows(x2, w.data)
    if b is not None:
        y = y + b.data
    wd = w.data

    def adjoint(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(y.reshape(*lead, wd.shape[1]), parents, adjoint, "linear")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product (..., M, K) @ (..., K, N) with identical leading dims."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, (a, b), adjoint, "matmul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return make_result(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),), "swish")


def glu(x: Tensor) -> Tensor:
    """Split the last axis in halves (a, b) and return a * sigmoid(b)."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu: last axis must be even, got {x.shape}")
    a, b = x.data[..., : d // 2], x.data[..., d // 2 :]
    s = _sigmoid(b)

    def adjoint(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return make_result(a * s, (x,), adjoint, "glu")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, broadcastable) zeroes entries exactly."""
    z = x.data
    m = None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=-1).all():
            raise ValueError("softmax: a row is fully masked")
        z = z + np.where(m, 0, MASK_FILL).astype(z.dtype)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    if m is not None:
        e = e * m
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return make_result(y, (x,), adjoint, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def adjoint(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return make_result(y, (x,), adjoint, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma is not None and gamma.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    # a rounded mean can leave ulp-sized residue on constant rows; centre those exactly
    xc = np.where(np.ptp(x.data, axis=-1, keepdims=True) == 0, 0, x.data - mu).astype(x.dtype)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = xhat * gamma.data + beta.data

    def adjoint(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data if gamma is not None else g
        gx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    parents = (x, gamma, beta) if gamma is not None else (x,)
    return make_result(y, parents, adjoint, "layer_norm")


def depthwise_conv(x: Tensor, w: Tensor, valid: np.ndarray, center: int) -> Tensor:
    """Per-channel 1-D convolution with a per-(tap, position) validity mask.

    ``x`` is (B, N, C), ``w`` is (C, K) and ``valid`` is (K, B, N); tap ``k``
    of output ``i`` reads input ``i + k - center`` when ``valid[k, b, i]``.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ShapeError(f"depthwise_conv: input {x.shape} vs kernel {w.shape}")
    B, N, _ = x.shape
    if valid.shape != (w.shape[1], B, N):
        raise ShapeError(f"depthwise_conv: validity {valid.shape} vs expected {(w.shape[1], B, N)}")
    dt = np.result_type(x.dtype, w.dtype)
    xd = np.ascontiguousarray(x.data, dtype=dt)
    wd = np.ascontiguousarray(w.data, dtype=dt)
    vd = np.ascontiguousarray(valid, dtype=dt)
    y = kernels.depthwise_forward(xd, wd, vd, center)

    def adjoint(g):
        return kernels.depthwise_backward(np.ascontiguousarray(g), xd, wd, vd, center)

    return make_result(y, (x, w), adjoint, "depthwise_conv")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Channels-last 2-D convolution: x (B, H, W, Cin), w (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    B, H, W, C = x.shape
    kh, kw, _, co = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    sb, sh, sw, sc = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, ho, wo, kh, kw, C), (sb, stride * sh, stride * sw, sh, sw, sc), writeable=False
    )
    cols = win.reshape(B * ho * wo, kh * kw * C)
    wm = w.data.reshape(kh * kw * C, co)
    y = (_mm_rows(cols, wm) + b.data).reshape(B, ho, wo, co)

    def adjoint(g):
        g2 = g.reshape(-1, co)
        dcols = (g2 @ wm.T).reshape(B, ho, wo, kh, kw, C)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[
                    :, :, :, i, j
                ]
        gx = dxp[:, pad : pad + H, pad : pad + W]
        return gx, (cols.T @ g2).reshape(w.shape), g2.sum(axis=0)

    return make_result(y, (x, w, b), adjoint, "conv2d")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {V}")

    def adjoint(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(table.data[ids], (table,), adjoint, "embedding")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def adjoint(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_result(np.array(x.data[idx]), (x,), adjoint, "getitem")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``idx`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    return getitem(x, idx)


def index_add(rows: Tensor, idx, n: int) -> Tensor:
    """Scatter-add ``rows`` (M, D) into a zero (n, D) tensor at row ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if rows.ndim != 2 or rows.shape[0] != len(idx):
        raise ShapeError(f"index_add: rows {rows.shape} vs {len(idx)} indices")
    out = np.zeros((n, rows.shape[1]), dtype=rows.dtype)
    np.add.at(out, idx, rows.data)
    return make_result(out, (rows,), lambda g: (g[idx],), "index_add")


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, adjoint, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis)), (x,), adjoint, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return mul_const(x, keep)
