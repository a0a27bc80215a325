"""Hot-loop kernels: compiled extension when available, NumPy fallback otherwise.

Set ``HYBRIDASR_KERNELS=python`` to force the fallback. Inputs wider than
float64 (extended precision) always take the NumPy path.
"""
import os

from . import _pykernels

python = _pykernels

if os.environ.get("HYBRIDASR_KERNELS", "").lower() == "python":
    compiled = None
else:
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else _pykernels
BACKEND = "cython" if compiled is not None else "python"

edit_distance = _impl.edit_distance


def _wide(a) -> bool:
    return a.dtype.itemsize > 8


def ctc_forward_backward(log_probs, target, blank):
    impl = _pykernels if _wide(log_probs) else _impl
    return impl.ctc_forward_backward(log_probs, target, blank)


def depthwise_forward(x, w, valid, center):
    impl = _pykernels if _wide(x) or _wide(w) else _impl
    return impl.depthwise_forward(x, w, valid, center)


def depthwise_backward(g, x, w, valid, center):
    impl = _pykernels if _wide(g) or _wide(x) or _wide(w) else _impl
    return impl.depthwise_backward(g, x, w, valid, center)
