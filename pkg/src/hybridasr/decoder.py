"""Offline decoding: encode speech once, then search over text tokens.

Speech rows never depend on text, so each layer's speech keys/values are
computed once and reused for every hypothesis and every step.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels, ops
from .conformer import DecoderOnlyConformer, LayerCache
from .frontend import EOS, PAD, SOS, subsampled_length
from .tensor import no_grad


@dataclass(frozen=True)
class SpeechCache:
    layers: tuple[LayerCache, ...]
    speech_len: int
    final: np.ndarray  # speech rows after the last block, (T, D)

    @property
    def states(self) -> np.ndarray:
        """Per-layer speech activations, (L, T, D)."""
        return np.stack([c.state[0] for c in self.layers])


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float = 0.0
    finished: bool = False
    scores: list[float] = field(default_factory=list)  # running score after each token


@dataclass
class DecodeResult:
    tokens: list[int]  # without the end-of-sequence token
    score: float
    finished: bool
    beam: list[Hypothesis]


def cache_speech(model: DecoderOnlyConformer, feats) -> SpeechCache:
    """Run the speech stream through every layer once and keep what text positions need."""
    feats = np.asarray(feats)
    if feats.ndim == 2:
        feats = feats[None]
    with no_grad():
        layers, final, lens, _ = model.encode_speech(feats)
    frozen = []
    for c in layers:
        for a in (c.state, c.keys, c.values):
            a.flags.writeable = False
        frozen.append(c)
    return SpeechCache(tuple(frozen), int(lens[0]), final.data[0])


def _mask_specials(lp: np.ndarray) -> np.ndarray:
    lp = lp.copy()
    lp[..., PAD] = -np.inf
    lp[..., SOS] = -np.inf
    return lp


def cached_step(model: DecoderOnlyConformer, cache: SpeechCache):
    """Next-token log-probs for a batch of equal-length prefixes, using the cache."""

    def step(prefixes: list[list[int]]) -> np.ndarray:
        text_in = np.array([[SOS] + p for p in prefixes], dtype=np.int64)
        with no_grad():
            logits = model.forward_text_cached(list(cache.layers), cache.speech_len, text_in)
            lp = ops.log_softmax(ops.getitem(logits, (slice(None), -1))).data
        return _mask_specials(lp)

    return step


def recompute_step(model: DecoderOnlyConformer, feats):
    """Next-token log-probs by a full joint forward of speech and prefix, one hypothesis at a time."""
    feats = np.asarray(feats)
    if feats.ndim == 2:
        feats = feats[None]

    def step(prefixes: list[list[int]]) -> np.ndarray:
        rows = []
        for p in prefixes:
            text_in = np.array([[SOS] + p], dtype=np.int64)
            with no_grad():
                out = model(feats, [feats.shape[1]], text_in, [text_in.shape[1]])
                rows.append(ops.log_softmax(ops.getitem(out.text_logits, (slice(None), -1))).data[0])
        return _mask_specials(np.stack(rows))

    return step


def default_max_len(speech_len: int) -> int:
    return 2 + speech_len // 2


def beam_search(step, beam: int = 4, max_len: int = 10) -> DecodeResult:
    """Length-synchronous beam search; scores are summed token log-probs.

    ``step(prefixes)`` returns next-token log-probabilities (n, V). Finished
    hypotheses stay in the beam and compete with live ones; the search ends
    when the whole beam is finished or ``max_len`` tokens were emitted.
    """
    if beam < 1 or max_len < 1:
        raise ValueError(f"beam and max_len must be >= 1 (beam={beam}, max_len={max_len})")
    hyps = [Hypothesis([])]
    for _ in range(max_len):
        alive = [h for h in hyps if not h.finished]
        if not alive:
            break
        lp = step([h.tokens for h in alive])
        cands = [h for h in hyps if h.finished]
        for h, row in zip(alive, lp):
            top = np.argsort(-row, kind="stable")[:beam]
            for v in top:
                if not np.isfinite(row[v]):
                    continue
                s = h.score + float(row[v])
                cands.append(Hypothesis(h.tokens + [int(v)], s, int(v) == EOS, h.scores + [s]))
        cands.sort(key=lambda h: (-h.score, h.tokens))
        hyps = cands[:beam]
    done = [h for h in hyps if h.finished]
    if done:
        best = done[0]
        return DecodeResult(best.tokens[:-1], best.score, True, hyps)
    warnings.warn("no hypothesis emitted end-of-sequence within max_len; returning best partial")
    best = hyps[0]
    return DecodeResult(best.tokens, best.score, False, hyps)


def greedy_search(step, max_len: int = 10) -> DecodeResult:
    tokens, score = [], 0.0
    for _ in range(max_len):
        row = step([tokens])[0]
        v = int(np.argmax(row))
        score += float(row[v])
        tokens.append(v)
        if v == EOS:
            return DecodeResult(tokens[:-1], score, True, [])
    return DecodeResult(tokens, score, False, [])


def decode(model: DecoderOnlyConformer, feats, beam: int = 4, max_len: int | None = None,
           cached: bool = True) -> DecodeResult:
    """Beam-decode one utterance (T0, D_a); ``cached=False`` recomputes speech every step."""
    feats = np.asarray(feats)
    was_training = model.training
    model.eval()
    try:
        if cached:
            cache = cache_speech(model, feats)
            step, T = cached_step(model, cache), cache.speech_len
        else:
            step, T = recompute_step(model, feats), subsampled_length(feats.shape[-2])
        return beam_search(step, beam, default_max_len(T) if max_len is None else max_len)
    finally:
        model.train(was_training)


def greedy_decode(model: DecoderOnlyConformer, feats, max_len: int | None = None) -> DecodeResult:
    """Plain argmax decoding (the reference that beam=1 must reproduce)."""
    was_training = model.training
    model.eval()
    try:
        cache = cache_speech(model, feats)
        ml = default_max_len(cache.speech_len) if max_len is None else max_len
        return greedy_search(cached_step(model, cache), ml)
    finally:
        model.train(was_training)


def greedy_decode_batch(model: DecoderOnlyConformer, feats, feat_lens, max_len: int | None = None) -> list[list[int]]:
    """Batched greedy decoding across utterances (used for quick dev scoring)."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            layers, _, speech_lens, _ = model.encode_speech(feats, feat_lens)
            B = len(speech_lens)
            ml = default_max_len(int(speech_lens.max())) if max_len is None else max_len
            seqs = np.full((B, 1), SOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(ml):
                logits = model.forward_text_cached(layers, speech_lens, seqs)
                row = _mask_specials(logits.data[:, -1])
                nxt = np.where(done, EOS, np.argmax(row, axis=-1))
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        out = []
        for s in seqs[:, 1:]:
            s = list(s)
            out.append(s[: s.index(EOS)] if EOS in s else s)
        return out
    finally:
        model.train(was_training)


def wer(ref, hyp) -> float:
    """Edit distance between token/word sequences divided by the reference length."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("reference is empty")
    return edit_distance(ref, hyp) / len(ref)


def edit_distance(ref, hyp) -> int:
    vocab: dict = {}
    a = np.array([vocab.setdefault(x, len(vocab)) for x in ref], dtype=np.int64)
    b = np.array([vocab.setdefault(x, len(vocab)) for x in hyp], dtype=np.int64)
    return int(kernels.edit_distance(a, b))


def corpus_wer(refs, hyps) -> float:
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    words = sum(len(r) for r in refs)
    if words == 0:
        raise ValueError("references are empty")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / words


def decode_corpus(model: DecoderOnlyConformer, feats_list, beam: int = 4, greedy: bool = False) -> list[DecodeResult]:
    """Decode each utterance independently; output order follows the input order."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if greedy:
            return [greedy_decode(model, f) for f in feats_list]
        return [decode(model, f, beam=beam) for f in feats_list]
