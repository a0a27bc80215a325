"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a NumPy array. Differentiable operations (see
:mod:`hybridasr.ops`) record their parents and an adjoint closure on the
output; :func:`backward` walks the recorded graph in reverse topological
order and accumulates gradients on leaf tensors.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_adjoint", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # thin operator sugar; the real implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def make_result(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it when grads are needed.

    ``adjoint(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._adjoint = adjoint
        out._op = op
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every reachable leaf. When
    ``params`` is given, members that did not participate receive a zero
    gradient. Returns a map from leaf tensor to its gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; recompute the forward pass")
    loss._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._adjoint is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
                continue
            pgrads = node._adjoint(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"adjoint of {node._op} produced {pg.shape} for input {p.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            # free saved inputs as we go
            node._adjoint = None
            node._parents = ()
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            leaves.setdefault(p, p.grad)
    return leaves


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
    oracle_dtype=None,
) -> dict:
    """Compare analytic gradients against central differences.

    ``f`` recomputes the scalar loss from the current parameter values. Up
    to ``n_samples`` coordinates are drawn uniformly across all parameters.
    With ``oracle_dtype`` (e.g. ``np.longdouble``) the perturbed losses are
    evaluated with parameters cast to that wider type, which lowers the
    rounding floor of the differences; analytic gradients stay float64.
    Returns a report with ``max_rel_err`` and per-coordinate details.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters; {p.name or p} is {p.data.dtype}")
    rng = rng or np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    backward(f(), params)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    flat = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rows = []
    worst = 0.0
    originals = [p.data for p in params]
    if oracle_dtype is not None:
        for p in params:
            p.data = p.data.astype(oracle_dtype)
    try:
        for k in np.sort(flat):
            row = _probe(f, params, offsets, int(k), eps, analytic)
            worst = max(worst, row["rel_err"])
            rows.append(row)
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return {"max_rel_err": worst, "n_coords": len(rows), "coords": rows}


def _probe(f, params, offsets, k: int, eps: float, analytic) -> dict:
    """Central difference at flat coordinate ``k`` compared with its analytic value."""
    pi = int(np.searchsorted(offsets, k, side="right") - 1)
    ci = int(k - offsets[pi])
    p = params[pi]
    view = p.data.reshape(-1)
    orig = view[ci]
    with no_grad():
        # keep the loss in its own precision (.item() would round to float64)
        view[ci] = orig + eps
        fp = f().data.reshape(())[()]
        view[ci] = orig - eps
        fm = f().data.reshape(())[()]
    view[ci] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericalError(f"non-finite loss perturbing {p.name or pi}[{ci}]: f+={fp}, f-={fm}")
    num = float((fp - fm) / (2 * eps))
    ana = float(analytic[pi].reshape(-1)[ci])
    rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
    return {"param": p.name or str(pi), "index": ci, "analytic": ana, "numeric": num, "rel_err": rel}
