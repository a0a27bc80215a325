"""Modality-aware sparse mixture of experts.

Speech and text positions are routed within disjoint expert pools, each
with its own router. ``moe-single`` mode puts every expert in one shared
pool (the no-grouping baseline).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Linear, Module
from .tensor import Tensor, make_result

SPEECH, TEXT, SHARED = "speech", "text", "shared"


def active_pool(i: int, T: int) -> str:
    """Pool serving 1-based position ``i`` given the modality boundary ``T``."""
    return SPEECH if i <= T else TEXT


def select_topk(p, k: int) -> np.ndarray:
    """Indices of the ``k`` largest probabilities per row, ties to the lowest index."""
    p = np.asarray(p)
    squeeze = p.ndim == 1
    p2 = p[None] if squeeze else p
    if not 1 <= k <= p2.shape[-1]:
        raise ValueError(f"top-k needs 1 <= k <= {p2.shape[-1]}, got k={k}")
    sel = np.argsort(-p2, axis=-1, kind="stable")[:, :k]
    return sel[0] if squeeze else sel


class FeedForward(Module):
    """Two-layer position-wise network with swish."""

    def __init__(self, d: int, d_hidden: int, rng, dtype, test_mode: bool = False):
        self.w1 = Linear(d, d_hidden, rng, dtype)
        # no output bias: k experts of width d_hidden/k then match the dense FFN parameter count
        self.w2 = Linear(d_hidden, d, rng, dtype, bias=False)
        self.test_mode = test_mode

    def __call__(self, x: Tensor, rng=None, p_drop: float = 0.0) -> Tensor:
        h = self.w1(x)
        if not self.test_mode:
            h = ops.swish(h)
        h = ops.dropout(h, p_drop, rng)
        return self.w2(h)


class ExpertPool(Module):
    def __init__(self, name: str, n: int, offset: int, d: int, d_exp: int, rng, dtype, test_mode=False):
        self.name = name
        self.offset = offset  # global id of this pool's first expert
        self.experts = [FeedForward(d, d_exp, rng, dtype, test_mode) for _ in range(n)]
        self.router = Linear(d, n, rng, dtype)
        self.router.w.data[...] = 0  # uniform initial routing

    def __len__(self):
        return len(self.experts)

    def route(self, x: Tensor) -> Tensor:
        """Router probabilities (M, n) for rows ``x`` (M, D)."""
        return ops.softmax(self.router(x))


@dataclass
class PoolStats:
    load: np.ndarray  # f_j: fraction of assignments per expert
    mean_prob: Tensor | None  # P_j: mean router probability (differentiable)
    n_tokens: int


@dataclass
class RoutingRecord:
    """Per-layer routing outcome.

    ``assignments[stream]`` holds ``(rows, experts, probs, pool)`` where
    ``rows`` index the flattened (B*L) stream, ``experts`` are global expert
    ids (M, k), ``probs`` the router distribution (M, n_pool) and ``pool``
    the serving pool's name.
    """

    pools: dict[str, PoolStats] = field(default_factory=dict)
    assignments: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, str]] = field(default_factory=dict)


def _row_normalize(w: Tensor) -> Tensor:
    s = w.data.sum(axis=1, keepdims=True)
    wd = w.data

    def adjoint(g):
        return ((g - np.sum(g * wd, axis=1, keepdims=True) / s) / s,)

    return make_result(wd / s, (w,), adjoint, "row_normalize")


class MoE(Module):
    def __init__(self, cfg, rng, dtype):
        d, de = cfg.d_model, cfg.expert_dim
        self.k = cfg.k
        self.renormalize = cfg.renormalize_topk
        self.mode = cfg.moe_mode
        if cfg.moe_mode == "moe-modality":
            self.speech_pool = ExpertPool(SPEECH, cfg.n_speech_experts, 0, d, de, rng, dtype, cfg.test_mode)
            self.text_pool = ExpertPool(
                TEXT, cfg.n_text_experts, cfg.n_speech_experts, d, de, rng, dtype, cfg.test_mode
            )
        elif cfg.moe_mode == "moe-single":
            self.shared_pool = ExpertPool(SHARED, cfg.n_experts, 0, d, de, rng, dtype, cfg.test_mode)
        else:
            raise ValueError(f"MoE layer needs an MoE mode, got {cfg.moe_mode!r}")

    def _run_pool(self, pool: ExpertPool, streams: dict[str, tuple[Tensor, np.ndarray]], record: RoutingRecord):
        """Route the valid rows of each stream through ``pool``; returns per-stream outputs."""
        n, k = len(pool), self.k
        counts = np.zeros(n)
        prob_sums = []
        total = 0
        outputs = {}
        for sname, (x, valid) in streams.items():
            B, L, D = x.shape
            flat = ops.reshape(x, (B * L, D))
            rows = np.flatnonzero(valid.reshape(-1))
            if len(rows) == 0:
                outputs[sname] = Tensor(np.zeros(x.shape, dtype=x.dtype))
                continue
            xr = ops.gather_rows(flat, rows)
            p = pool.route(xr)
            sel = select_topk(p.data, k)
            w = ops.getitem(p, (np.arange(len(rows))[:, None], sel))
            if self.renormalize:
                w = _row_normalize(w)
            parts, where = [], []
            for e in range(n):
                r, slot = np.nonzero(sel == e)
                if len(r) == 0:
                    continue
                y = pool.experts[e](ops.gather_rows(xr, r))
                parts.append(ops.scale_rows(y, ops.getitem(w, (r, slot))))
                where.append(r)
            mixed = ops.index_add(ops.concat(parts, axis=0), np.concatenate(where), len(rows))
            out = ops.index_add(mixed, rows, B * L)
            outputs[sname] = ops.reshape(out, (B, L, D))
            counts += np.bincount(sel.reshape(-1), minlength=n)
            prob_sums.append(ops.sum(p, axis=0))
            total += len(rows)
            record.assignments[sname] = (rows, sel + pool.offset, p.data, pool.name)
        if total:
            P = prob_sums[0]
            for extra in prob_sums[1:]:
                P = ops.add(P, extra)
            stats = PoolStats(counts / (k * total), ops.scale(P, 1.0 / total), total)
        else:
            stats = PoolStats(np.zeros(n), None, 0)
        record.pools[pool.name] = stats
        return outputs

    def __call__(self, speech: Tensor | None, text: Tensor | None, speech_valid=None, text_valid=None):
        """Mix speech (B, Ts, D) and text (B, Tt, D) streams; either may be None.

        Returns ``(speech_out, text_out, record)``.
        """
        record = RoutingRecord()
        streams = {}
        if speech is not None:
            streams[SPEECH] = (speech, _valid(speech, speech_valid))
        if text is not None:
            streams[TEXT] = (text, _valid(text, text_valid))
        if self.mode == "moe-modality":
            out = {}
            for name, pool in ((SPEECH, self.speech_pool), (TEXT, self.text_pool)):
                if name in streams:
                    out.update(self._run_pool(pool, {name: streams[name]}, record))
        else:
            out = self._run_pool(self.shared_pool, streams, record)
        return out.get(SPEECH), out.get(TEXT), record


def _valid(x: Tensor, valid) -> np.ndarray:
    if valid is None:
        return np.ones(x.shape[:2], dtype=bool)
    return np.asarray(valid, dtype=bool)


def layer_balance(record: RoutingRecord) -> Tensor | None:
    """Sum over pools of sum_j f_j * P_j for one layer (None when no pool saw tokens)."""
    terms = [ops.sum(ops.mul_const(s.mean_prob, s.load)) for s in record.pools.values() if s.n_tokens]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


def load_balance_loss(records, alpha: float = 0.1, dtype=np.float64) -> Tensor:
    """alpha times the per-layer balance term averaged over layers."""
    terms = [t for t in (layer_balance(r) for r in records) if t is not None]
    if not terms or alpha == 0:
        return Tensor(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, alpha / len(records))


def balance_from_stats(loads, probs, alpha: float = 0.1) -> float:
    """Closed-form balance value from per-pool (f, P) vectors; used for reporting."""
    return alpha * float(sum(np.dot(f, p) for f, p in zip(loads, probs)))


def usage_entropy(load: np.ndarray) -> float:
    """Entropy (nats) of an expert-load distribution."""
    p = np.asarray(load, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
