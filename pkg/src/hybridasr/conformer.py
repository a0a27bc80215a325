"""Hybrid-causality Conformer blocks and the decoder-only model.

The unified sequence is carried as two streams (speech rows, text rows).
Speech rows only ever read speech rows (the mask gives them no text
columns and convolutions stop at the boundary), so speech activations are
computed identically whether or not text is present. That is what lets the
decoder cache them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import masking, ops
from .frontend import Frontend, UnifiedSequence, sinusoid_table
from .moe import MoE, FeedForward, RoutingRecord
from .nn import LayerNorm, Linear, Module, param
from .tensor import NumericalError, Tensor


@dataclass
class StreamContext:
    """Masks for one forward pass over padded speech/text streams."""

    speech_lens: np.ndarray
    text_lens: np.ndarray | None
    speech_attn: np.ndarray  # (B, 1, Tmax, Tmax)
    speech_conv: np.ndarray  # (K, B, Tmax)
    text_attn: np.ndarray | None = None  # (B, 1, Umax, Tmax+Umax)
    text_conv: np.ndarray | None = None  # (K, B, Umax)
    rng: np.random.Generator | None = None

    @property
    def speech_valid(self):
        return np.arange(self.speech_attn.shape[-1])[None, :] < self.speech_lens[:, None]

    @property
    def text_valid(self):
        return np.arange(self.text_conv.shape[-1])[None, :] < self.text_lens[:, None]


def make_context(cfg, speech_lens, tmax, text_lens=None, umax=0, rng=None) -> StreamContext:
    speech_lens = np.asarray(speech_lens)
    full = masking.batch_attention_mask(speech_lens, np.zeros_like(speech_lens) if text_lens is None else text_lens,
                                        tmax, umax)
    ctx = StreamContext(
        speech_lens=speech_lens,
        text_lens=None if text_lens is None else np.asarray(text_lens),
        speech_attn=full[:, None, :tmax, :tmax],
        speech_conv=masking.speech_conv_validity(speech_lens, tmax, cfg.conv_kernel),
        rng=rng,
    )
    if text_lens is not None:
        ctx.text_attn = full[:, None, tmax:, :]
        ctx.text_conv = masking.text_conv_validity(text_lens, umax, cfg.conv_kernel, cfg.text_conv_window)
    return ctx


@dataclass
class LayerCache:
    state: np.ndarray  # speech rows after the first half-step FFN, (B, T, D)
    keys: np.ndarray  # (B, H, T, dh)
    values: np.ndarray


class ConformerBlock(Module):
    def __init__(self, cfg, rng, dtype, index: int = 0):
        d = cfg.d_model
        self.index = index
        self.heads = cfg.heads
        self.dropout_p = cfg.dropout
        self.test_mode = cfg.test_mode
        self.center = cfg.conv_kernel // 2
        self.ffn1_norm = LayerNorm(d, dtype)
        self.ffn1 = FeedForward(d, cfg.ffn_dim, rng, dtype, cfg.test_mode)
        self.attn_norm = LayerNorm(d, dtype)
        self.wq = Linear(d, d, rng, dtype)
        # a key bias only shifts each score row by a constant, which softmax ignores
        self.wk = Linear(d, d, rng, dtype, bias=False)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)
        self.conv_norm = LayerNorm(d, dtype)
        self.pw1 = Linear(d, 2 * d, rng, dtype)
        self.dw = param(rng.normal(0, 1.0 / np.sqrt(cfg.conv_kernel), (d, cfg.conv_kernel)), dtype)
        self.conv_ln = LayerNorm(d, dtype)
        self.pw2 = Linear(d, d, rng, dtype)
        self.ffn2_norm = LayerNorm(d, dtype)
        if cfg.moe_mode == "dense":
            self.ffn2 = FeedForward(d, cfg.ffn_dim, rng, dtype, cfg.test_mode)
            self.moe = None
        else:
            self.ffn2 = None
            self.moe = MoE(cfg, rng, dtype)

    def _drop(self, x, ctx):
        return ops.dropout(x, self.dropout_p, ctx.rng if self.training else None)

    # sub-blocks ----------------------------------------------------------
    def half_ffn(self, x: Tensor, ctx) -> Tensor:
        return ops.add(x, ops.scale(self._drop(self.ffn1(self.ffn1_norm(x)), ctx), 0.5))

    def qkv(self, x: Tensor):
        B, L, D = x.shape
        h = self.attn_norm(x)

        def split(t):
            return ops.transpose(ops.reshape(t, (B, L, self.heads, D // self.heads)), (0, 2, 1, 3))

        return split(self.wq(h)), split(self.wk(h)), split(self.wv(h))

    def attend(self, x: Tensor, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, ctx, keep_weights=None) -> Tensor:
        """x + Wo * MHSA; ``mask`` is (B, 1, Lq, Lk) boolean."""
        B, H, L, dh = q.shape
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = ops.softmax(scores, mask)
        if keep_weights is not None:
            keep_weights.append(weights.data)
        ctxv = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (B, L, H * dh))
        return ops.add(x, self._drop(self.wo(ctxv), ctx))

    def conv_module(self, x: Tensor, valid: np.ndarray) -> Tensor:
        h = x if self.test_mode else self.conv_norm(x)
        h = self.pw1(h)
        if self.test_mode:
            h = ops.getitem(h, (Ellipsis, slice(0, x.shape[-1])))
        else:
            h = ops.glu(h)
        h = ops.depthwise_conv(h, self.dw, valid, self.center)
        if not self.test_mode:
            h = ops.swish(self.conv_ln(h))
        return self.pw2(h)

    def conv(self, x: Tensor, valid: np.ndarray, ctx) -> Tensor:
        return ops.add(x, self._drop(self.conv_module(x, valid), ctx))

    def second_ffn(self, s: Tensor | None, t: Tensor | None, ctx):
        record = None
        ns = None if s is None else self.ffn2_norm(s)
        nt = None if t is None else self.ffn2_norm(t)
        if self.moe is None:
            ys = None if ns is None else self.ffn2(ns)
            yt = None if nt is None else self.ffn2(nt)
        else:
            ys, yt, record = self.moe(
                ns, nt,
                None if s is None else ctx.speech_valid,
                None if t is None else ctx.text_valid,
            )
        out_s = None if s is None else ops.add(s, ops.scale(self._drop(ys, ctx), 0.5))
        out_t = None if t is None else ops.add(t, ops.scale(self._drop(yt, ctx), 0.5))
        return out_s, out_t, record

    # full block ----------------------------------------------------------
    def __call__(self, s: Tensor, t: Tensor | None, ctx: StreamContext, trace: dict | None = None,
                 cache: LayerCache | None = None):
        """One block over both streams; with ``cache`` the speech stream is taken from it.

        Returns ``(speech_out, text_out, record)``; ``speech_out`` is None in
        cached mode.
        """
        if cache is None:
            s1 = self.half_ffn(s, ctx)
            qs, ks, vs = self.qkv(s1)
            s2 = self.attend(s1, qs, ks, vs, ctx.speech_attn, ctx,
                             None if trace is None else trace.setdefault("speech_attn", []))
            s3 = self.conv(s2, ctx.speech_conv, ctx)
            if trace is not None:
                trace.setdefault("speech_state", []).append(s1.data)
                trace.setdefault("speech_kv", []).append((ks.data, vs.data))
        else:
            s3 = None
            ks = Tensor(cache.keys)
            vs = Tensor(cache.values)
        t3 = None
        if t is not None:
            t1 = self.half_ffn(t, ctx)
            qt, kt, vt = self.qkv(t1)
            if ks.shape[0] != qt.shape[0]:
                # one cached utterance shared by several hypotheses
                reps = qt.shape[0]
                ks = Tensor(np.repeat(ks.data, reps, axis=0))
                vs = Tensor(np.repeat(vs.data, reps, axis=0))
            t2 = self.attend(t1, qt, ops.concat([ks, kt], axis=2), ops.concat([vs, vt], axis=2), ctx.text_attn, ctx,
                             None if trace is None else trace.setdefault("text_attn", []))
            t3 = self.conv(t2, ctx.text_conv, ctx)
        s4, t4, record = self.second_ffn(s3, t3, ctx)
        for name, out in (("speech", s4), ("text", t4)):
            if out is not None and not np.all(np.isfinite(out.data)):
                raise NumericalError(f"non-finite {name} activations in layer {self.index}")
        return s4, t4, record


@dataclass
class ModelOutput:
    text_logits: Tensor | None  # (B, Umax, V)
    ctc_logits: Tensor | None  # (B, Tmax, V+1)
    records: list[RoutingRecord | None]
    speech_lens: np.ndarray
    text_lens: np.ndarray | None
    trace: dict = field(default_factory=dict)


class DecoderOnlyConformer(Module):
    def __init__(self, cfg, seed: int | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.precision)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.frontend = Frontend(cfg, rng, self.dtype)
        self.blocks = [ConformerBlock(cfg, rng, self.dtype, i) for i in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.d_model, self.dtype)
        self.text_head = Linear(cfg.d_model, cfg.vocab_size, rng, self.dtype)
        self.ctc_head = Linear(cfg.d_model, cfg.vocab_size + 1, rng, self.dtype)
        # small output heads: predictions start close to uniform
        for head in (self.text_head, self.ctc_head):
            head.w.data *= 0.1
        self.dropout_rng = np.random.default_rng((cfg.seed if seed is None else seed) + 1)

    def context(self, speech_lens, tmax, text_lens=None, umax=0) -> StreamContext:
        rng = self.dropout_rng if self.training and self.cfg.dropout > 0 else None
        return make_context(self.cfg, speech_lens, tmax, text_lens, umax, rng)

    def embed(self, feats, feat_lens, text_in, text_lens) -> UnifiedSequence:
        return self.frontend(feats, feat_lens, text_in, text_lens)

    def forward_unified(self, seq: UnifiedSequence, trace: dict | None = None) -> ModelOutput:
        ctx = self.context(seq.speech_lens, seq.speech.shape[1], seq.text_lens, seq.text.shape[1])
        s, t = seq.speech, seq.text
        records = []
        for blk in self.blocks:
            s, t, rec = blk(s, t, ctx, trace)
            records.append(rec)
            if trace is not None:
                trace.setdefault("speech_out", []).append(s.data)
                trace.setdefault("text_out", []).append(t.data)
        return ModelOutput(
            text_logits=self.text_head(self.final_norm(t)),
            ctc_logits=self.ctc_head(self.final_norm(s)),
            records=records,
            speech_lens=seq.speech_lens,
            text_lens=seq.text_lens,
            trace=trace or {},
        )

    def __call__(self, feats, feat_lens, text_in, text_lens, trace: dict | None = None) -> ModelOutput:
        return self.forward_unified(self.embed(feats, feat_lens, text_in, text_lens), trace)

    def encode_speech(self, feats, feat_lens=None):
        """Speech-only pass; returns (per-layer caches, final speech states, lengths, records)."""
        s_raw, speech_lens = self.frontend.subsample(feats, feat_lens)
        B, tmax, _ = s_raw.shape
        pe_seq = _speech_only(self.frontend.project_speech(s_raw), speech_lens)
        ctx = self.context(speech_lens, tmax)
        s = pe_seq
        caches, records = [], []
        for blk in self.blocks:
            trace = {}
            s, _, rec = blk(s, None, ctx, trace)
            ks, vs = trace["speech_kv"][0]
            caches.append(LayerCache(trace["speech_state"][0], ks, vs))
            records.append(rec)
        return caches, s, speech_lens, records

    def forward_text_cached(self, caches: list[LayerCache], speech_lens, text_in, text_lens=None) -> Tensor:
        """Text logits (B, U, V) for ``text_in`` given cached speech layers."""
        text_in = np.atleast_2d(np.asarray(text_in))
        B, umax = text_in.shape
        text_lens = np.full(B, umax) if text_lens is None else np.asarray(text_lens)
        speech_lens = np.broadcast_to(np.asarray(speech_lens), (B,))
        tmax = caches[0].keys.shape[2]
        emb = self.frontend.embed_text(text_in)
        t_pos = speech_lens[:, None] + np.arange(1, umax + 1)[None, :]
        table = sinusoid_table(int(t_pos.max()), self.cfg.d_model, self.dtype)
        t = ops.add(emb, Tensor(table[t_pos]))
        ctx = self.context(speech_lens, tmax, text_lens, umax)
        for blk, cache in zip(self.blocks, caches):
            _, t, _ = blk(None, t, ctx, cache=cache)
        return self.text_head(self.final_norm(t))


def _speech_only(speech: Tensor, speech_lens) -> Tensor:
    B, tmax, d = speech.shape
    table = sinusoid_table(tmax, d, speech.dtype)
    pos = np.broadcast_to(np.arange(1, tmax + 1), (B, tmax))
    return ops.add(speech, Tensor(table[pos]))


def count_parameters(model: DecoderOnlyConformer) -> dict:
    """Total parameters and parameters active for a single token.

    Active counts every non-MoE parameter plus ``k`` experts per MoE layer;
    router weights are reported separately as routing overhead.
    """
    cfg = model.cfg
    total = model.num_parameters()
    expert_total = router_total = active_experts = active_router = 0
    for blk in model.blocks:
        if blk.moe is None:
            continue
        pools = [blk.moe.shared_pool] if cfg.moe_mode == "moe-single" else [blk.moe.speech_pool, blk.moe.text_pool]
        per_expert = pools[0].experts[0].num_parameters()
        for pool in pools:
            expert_total += sum(e.num_parameters() for e in pool.experts)
            router_total += pool.router.num_parameters()
        active_experts += cfg.k * per_expert
        active_router += max(p.router.num_parameters() for p in pools)
    active = total - expert_total - router_total + active_experts
    return {"total": total, "active": active, "router_active": active_router, "router_total": router_total}
