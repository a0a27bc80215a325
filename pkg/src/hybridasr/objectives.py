"""Training objective: label-smoothed CE on text, CTC on speech, expert balance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, ops
from .moe import load_balance_loss
from .tensor import NumericalError, Tensor, make_result


class CTCError(ValueError):
    pass


def ctc_required_frames(target) -> int:
    """Minimum frames for ``target``: one per label plus a blank between repeats."""
    t = np.asarray(target)
    return len(t) + int(np.sum(t[1:] == t[:-1]))


def ctc_nll(log_probs: Tensor, targets, input_lens, blank: int) -> Tensor:
    """Mean over utterances of the CTC negative log-likelihood.

    ``log_probs`` is (B, Tmax, C) log-softmax output; ``targets`` a list of
    label arrays; frames at or past ``input_lens[b]`` are ignored.
    """
    B, tmax, C = log_probs.shape
    work = np.promote_types(log_probs.dtype, np.float64)
    lp = log_probs.data.astype(work)
    grad = np.zeros((B, tmax, C), dtype=work)
    total = work.type(0)
    for b in range(B):
        n = int(input_lens[b])
        tgt = np.asarray(targets[b], dtype=np.int64)
        if len(tgt) == 0:
            raise CTCError(f"utterance {b}: empty CTC target")
        need = ctc_required_frames(tgt)
        if need > n:
            raise CTCError(f"utterance {b}: target needs {need} frames but only {n} are available")
        nll, g = kernels.ctc_forward_backward(np.ascontiguousarray(lp[b, :n]), tgt, blank)
        total += nll
        grad[b, :n] = g
    value = np.asarray(total / B, dtype=log_probs.dtype)
    grad = (grad / B).astype(log_probs.dtype)
    return make_result(value, (log_probs,), lambda g: (g * grad,), "ctc")


def ctc_loss(logits: Tensor, targets, input_lens=None, blank: int | None = None) -> Tensor:
    """CTC loss from per-frame logits over |V|+1 classes (blank = last class by default)."""
    if logits.ndim == 2:
        logits = ops.reshape(logits, (1,) + logits.shape)
        targets = [targets]
    B, tmax, C = logits.shape
    input_lens = np.full(B, tmax) if input_lens is None else input_lens
    return ctc_nll(ops.log_softmax(logits), targets, input_lens, C - 1 if blank is None else blank)


def label_smoothed_ce(logits: Tensor, targets, eps: float = 0.1, valid=None) -> Tensor:
    """Mean over valid positions of -sum_c q_c log p_c, q = (1-eps) onehot + eps/|V|."""
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid text positions")
    q = np.full(logits.shape, eps / V, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], (1 - eps) + eps / V, axis=-1)
    q *= valid[..., None]
    logp = ops.log_softmax(logits)
    return ops.scale(ops.sum(ops.mul_const(logp, q)), -1.0 / n)


@dataclass
class LossBreakdown:
    ce: Tensor
    ctc: Tensor
    balance: Tensor
    total: Tensor
    ctc_weight: float = 0.3
    balance_weight: float = 0.1

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("ce", "ctc", "balance", "total")}


def total_loss(ce: Tensor, ctc: Tensor, balance: Tensor, ctc_weight: float = 0.3,
               balance_weight: float = 0.1) -> LossBreakdown:
    """L = ce + ctc_weight * ctc + balance_weight * balance.

    ``balance`` is the value of :func:`~hybridasr.moe.load_balance_loss`,
    which is itself alpha-scaled, so alpha enters the total twice.
    """
    for name, t in (("ce", ce), ("ctc", ctc), ("balance", balance)):
        if not np.isfinite(t.data).all():
            raise NumericalError(f"non-finite {name} loss")
    total = ops.add(ops.add(ce, ops.scale(ctc, ctc_weight)), ops.scale(balance, balance_weight))
    return LossBreakdown(ce, ctc, balance, total, ctc_weight, balance_weight)


def objectives_for(model, batch) -> tuple[LossBreakdown, object]:
    """Forward ``batch`` through ``model`` and assemble the weighted objective."""
    cfg = model.cfg
    out = model(batch.feats, batch.feat_lens, batch.text_in, batch.text_lens)
    umax = batch.text_in.shape[1]
    text_valid = np.arange(umax)[None, :] < np.asarray(batch.text_lens)[:, None]
    ce = label_smoothed_ce(out.text_logits, batch.text_out, cfg.label_smoothing, text_valid)
    ctc = ctc_loss(out.ctc_logits, batch.ctc_targets, out.speech_lens)
    bal = load_balance_loss([r for r in out.records if r is not None], cfg.balance_weight, model.dtype)
    return total_loss(ce, ctc, bal, cfg.ctc_weight, cfg.balance_weight), out
