"""Training loop, optimizer, schedule, augmentation and the synthetic recognition task."""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .conformer import DecoderOnlyConformer
from .decoder import corpus_wer, greedy_decode_batch
from .frontend import EOS, PAD, SOS, UNK
from .io import Checkpoint, load_checkpoint, save_checkpoint
from .objectives import objectives_for
from .tensor import NumericalError, backward, no_grad

N_SPECIAL = 4
PATTERN_SEED = 20240


class TrainingDiverged(NumericalError):
    """Non-finite loss; ``last_good`` points at the newest checkpoint on disk."""

    def __init__(self, msg: str, step: int, last_good: Path | None):
        super().__init__(msg)
        self.step = step
        self.last_good = last_good


# schedule and optimizer --------------------------------------------------

def noam_lr(step: int, warmup: int, peak: float) -> float:
    """peak * min(step/warmup, sqrt(warmup/step)); exactly ``peak`` at ``step == warmup``."""
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    if step <= warmup:
        return peak * step / warmup
    return peak * float(np.sqrt(warmup / step))


class Adam:
    """Adam with bias correction; a step with any non-finite gradient is skipped."""

    def __init__(self, named_params: dict, beta1=0.9, beta2=0.999, eps=1e-9):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0
        self.skipped = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> bool:
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in self.params.items():
            g = grads[n]
            m = self.m[n] = b1 * self.m[n] + (1 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
        return True

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{n}": a for n, a in self.m.items()}
        out.update({f"adam_v/{n}": a for n, a in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int, skipped: int = 0) -> None:
        for n in self.params:
            self.m[n] = np.array(state[f"adam_m/{n}"])
            self.v[n] = np.array(state[f"adam_v/{n}"])
        self.t, self.skipped = t, skipped


# augmentation ------------------------------------------------------------

def word_dropout(tokens, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each non-special token with <unk> independently with probability ``p``."""
    tokens = np.array(tokens, dtype=np.int64, copy=True)
    if p <= 0:
        return tokens
    eligible = tokens >= N_SPECIAL
    hit = rng.random(tokens.shape) < p
    tokens[eligible & hit] = UNK
    return tokens


def spec_augment(features, n_freq_masks: int, freq_width: int, n_time_masks: int, time_width: int,
                 rng: np.random.Generator, length: int | None = None) -> np.ndarray:
    """Zero ``n_freq_masks`` bands of exactly ``freq_width`` bins and ``n_time_masks`` spans of
    exactly ``time_width`` frames (within the first ``length`` frames), at random offsets."""
    x = np.array(features, copy=True)
    t0, d = x.shape
    length = t0 if length is None else length
    if n_freq_masks and not 0 < freq_width <= d:
        raise ValueError(f"frequency mask width {freq_width} must lie in [1, {d}]")
    if n_time_masks and not 0 < time_width <= length:
        raise ValueError(f"time mask width {time_width} must lie in [1, {length}]")
    for _ in range(n_freq_masks):
        f = int(rng.integers(0, d - freq_width + 1))
        x[:, f:f + freq_width] = 0
    for _ in range(n_time_masks):
        t = int(rng.integers(0, length - time_width + 1))
        x[t:t + time_width] = 0
    return x


# synthetic task ----------------------------------------------------------

@functools.lru_cache(maxsize=None)
def token_patterns(vocab_size: int, feat_dim: int = 16) -> np.ndarray:
    """Fixed unit-variance pattern per token id (independent of the sample seed)."""
    rng = np.random.default_rng(PATTERN_SEED)
    pats = rng.normal(0.0, 1.0, (vocab_size, feat_dim))
    pats[:N_SPECIAL] = 0
    pats.flags.writeable = False
    return pats


@dataclass
class SyntheticSample:
    features: np.ndarray  # (T0, D_a) float32
    tokens: np.ndarray  # target ids, last element EOS

    @property
    def symbols(self) -> np.ndarray:
        return self.tokens[:-1]


def generate_synthetic(seed, u_raw: int, vocab_size: int, frames_per_token: int = 8, sigma: float = 0.1,
                       feat_dim: int = 16) -> SyntheticSample:
    """Render ``u_raw`` random symbols as ``frames_per_token`` noisy copies of their pattern.

    Adjacent symbols always differ, so every symbol is a separate acoustic segment.
    """
    if frames_per_token % 4:
        raise ValueError(f"frames_per_token must be a multiple of 4, got {frames_per_token}")
    if u_raw < 1:
        raise ValueError("need at least one symbol")
    n_sym = vocab_size - N_SPECIAL
    if n_sym < 2 and u_raw > 1:
        raise ValueError("need at least two symbols to avoid adjacent repeats")
    rng = np.random.default_rng(seed)
    syms = [int(rng.integers(N_SPECIAL, vocab_size))]
    for _ in range(u_raw - 1):
        nxt = int(rng.integers(N_SPECIAL, vocab_size - 1))
        syms.append(nxt + (nxt >= syms[-1]))
    pats = token_patterns(vocab_size, feat_dim)
    feats = np.repeat(pats[syms], frames_per_token, axis=0)
    feats = feats + sigma * rng.normal(size=feats.shape)
    return SyntheticSample(feats.astype(np.float32), np.array(syms + [EOS], dtype=np.int64))


def make_dataset(cfg: TrainConfig, split: str) -> list[SyntheticSample]:
    n = {"train": cfg.train_utts, "dev": cfg.dev_utts}[split]
    tag = 0 if split == "train" else 1
    return [
        generate_synthetic((cfg.seed, tag, i), cfg.utt_tokens, cfg.vocab_size, cfg.frames_per_token,
                           cfg.noise, cfg.feat_dim)
        for i in range(n)
    ]


def dataset_hash(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.features).tobytes())
        h.update(s.tokens.tobytes())
    return h.hexdigest()


# batching ----------------------------------------------------------------

@dataclass
class Batch:
    feats: np.ndarray  # (B, T0max, D_a)
    feat_lens: np.ndarray
    text_in: np.ndarray  # (B, Umax): <s> y_1 .. y_{U-1}
    text_out: np.ndarray  # (B, Umax): y_1 .. y_U (= </s>)
    text_lens: np.ndarray
    ctc_targets: list = field(default_factory=list)  # symbols without </s>


def collate(samples, cfg: TrainConfig | None = None, rng: np.random.Generator | None = None) -> Batch:
    """Pad samples into a batch; with ``rng`` and ``cfg`` the augmentations are applied."""
    B = len(samples)
    t0 = max(s.features.shape[0] for s in samples)
    d = samples[0].features.shape[1]
    umax = max(len(s.tokens) for s in samples)
    feats = np.zeros((B, t0, d), dtype=np.float32)
    text_in = np.full((B, umax), PAD, dtype=np.int64)
    text_out = np.full((B, umax), PAD, dtype=np.int64)
    feat_lens = np.array([s.features.shape[0] for s in samples])
    text_lens = np.array([len(s.tokens) for s in samples])
    for b, s in enumerate(samples):
        f = s.features
        tin = np.concatenate([[SOS], s.tokens[:-1]])
        if rng is not None and cfg is not None:
            f = spec_augment(f, cfg.specaug_freq_masks, cfg.specaug_freq_width,
                             cfg.specaug_time_masks, cfg.specaug_time_width, rng)
            tin = word_dropout(tin, cfg.word_dropout, rng)
        feats[b, : len(f)] = f
        text_in[b, : len(tin)] = tin
        text_out[b, : len(s.tokens)] = s.tokens
    return Batch(feats, feat_lens, text_in, text_out, text_lens, [s.symbols for s in samples])


# checkpoints -------------------------------------------------------------

def model_checkpoint(model: DecoderOnlyConformer, opt: Adam | None = None, **meta) -> Checkpoint:
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    optimizer = opt.state_dict() if opt is not None else {}
    if opt is not None:
        meta.update(adam_t=opt.t, adam_skipped=opt.skipped)
    return Checkpoint(model.cfg, params, {k: v.copy() for k, v in optimizer.items()}, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> DecoderOnlyConformer:
    model = DecoderOnlyConformer(ckpt.config)
    model.load_state_dict(ckpt.params)
    return model.eval()


def average_checkpoints(items) -> Checkpoint:
    """Elementwise parameter mean; the result carries no optimizer state."""
    ckpts = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in items]
    if not ckpts:
        raise ValueError("nothing to average")
    fps = {c.fingerprint for c in ckpts}
    if len(fps) != 1:
        raise ValueError(f"checkpoints have different config fingerprints: {sorted(fps)}")
    first = ckpts[0]
    params = {}
    for name, ref in first.params.items():
        # sum in a fixed (sorted) order so the mean does not depend on argument order
        stack = sorted((c.params[name] for c in ckpts), key=lambda a: a.tobytes())
        acc = np.zeros(ref.shape, dtype=np.float64)
        for a in stack:
            acc += a
        params[name] = (acc / len(ckpts)).astype(ref.dtype)
    meta = {"averaged": len(ckpts), "epochs": [c.meta.get("epoch") for c in ckpts]}
    return Checkpoint(first.config, params, {}, meta)


# evaluation --------------------------------------------------------------

def evaluate(model: DecoderOnlyConformer, samples, batch_size: int = 50) -> dict:
    """Dev loss breakdown (eval mode, no augmentation) and greedy token error rate."""
    was_training = model.training
    model.eval()
    sums = {"ce": 0.0, "ctc": 0.0, "balance": 0.0, "total": 0.0}
    refs, hyps = [], []
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            batch = collate(chunk)
            with no_grad():
                losses, _ = objectives_for(model, batch)
            for k, v in losses.values().items():
                sums[k] += v * len(chunk)
            hyps += greedy_decode_batch(model, batch.feats, batch.feat_lens)
            refs += [list(s.symbols) for s in chunk]
    finally:
        model.train(was_training)
    n = max(len(samples), 1)
    out = {k: v / n for k, v in sums.items()}
    out["wer"] = corpus_wer(refs, hyps) if samples else float("nan")
    return out


# training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: DecoderOnlyConformer
    checkpoint: Checkpoint
    metrics: list[dict]
    dev: list[dict]
    steps: int
    skipped: int
    paths: dict[str, str] = field(default_factory=dict)


def _routing_stats(records) -> tuple[dict, dict]:
    """Per-pool expert load fractions f and mean router probabilities P, averaged over layers."""
    loads: dict[str, list[np.ndarray]] = {}
    probs: dict[str, list[np.ndarray]] = {}
    for rec in records:
        if rec is None:
            continue
        for name, st in rec.pools.items():
            if st.n_tokens:
                loads.setdefault(name, []).append(st.load)
                probs.setdefault(name, []).append(st.mean_prob.data)

    def mean(acc):
        return {k: [float(x) for x in np.mean(v, axis=0)] for k, v in sorted(acc.items())}

    return mean(loads), mean(probs)


def train(cfg: TrainConfig, out_dir=None, train_data=None, dev_data=None, max_steps: int | None = None,
          evaluate_dev: bool = True, log=None) -> TrainResult:
    """Train ``cfg`` on the synthetic task; deterministic for a given config.

    With ``out_dir`` the per-step metrics (``metrics.jsonl``), per-epoch dev
    summaries (``dev.jsonl``), per-epoch checkpoints and the averaged
    ``final.ckpt`` are written there.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_data = make_dataset(cfg, "train") if train_data is None else train_data
    dev_data = make_dataset(cfg, "dev") if dev_data is None and evaluate_dev else (dev_data or [])

    model = DecoderOnlyConformer(cfg)
    named = dict(model.named_parameters())
    opt = Adam(named, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    order_rng = np.random.default_rng((cfg.seed, 2))
    aug_rng = np.random.default_rng((cfg.seed, 3))

    metrics, dev_log, epoch_ckpts = [], [], []
    paths: dict[str, str] = {}
    metrics_fh = open(out / "metrics.jsonl", "w") if out is not None else None
    last_good: Path | None = None
    if out is not None:
        last_good = save_checkpoint(model_checkpoint(model, opt, epoch=0, step=0), out / "epoch000.ckpt")
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            if max_steps is not None and step >= max_steps:
                break
            model.train()
            perm = order_rng.permutation(len(train_data))
            for i in range(0, len(perm), cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                step += 1
                batch = collate([train_data[j] for j in perm[i:i + cfg.batch_size]], cfg, aug_rng)
                lr = noam_lr(step, cfg.warmup, cfg.peak_lr)
                try:
                    losses, fwd = objectives_for(model, batch)
                except NumericalError as exc:
                    raise TrainingDiverged(f"step {step}: {exc}", step, last_good) from exc
                vals = losses.values()
                backward(losses.total, named.values())
                grads = {n: p.grad for n, p in named.items()}
                opt.step(grads, lr)
                model.zero_grad()
                load, prob = _routing_stats(fwd.records)
                rec = {"step": step, "epoch": epoch, "lr": lr, **vals, "skipped": opt.skipped,
                       "load": load, "prob": prob}
                metrics.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                    metrics_fh.flush()
                if log is not None and step % 50 == 0:
                    log(f"step {step} epoch {epoch} lr {lr:.2e} total {vals['total']:.4f}")
            ck = model_checkpoint(model, opt, epoch=epoch, step=step)
            epoch_ckpts.append(ck)
            epoch_ckpts = epoch_ckpts[-cfg.avg_last:]
            if out is not None:
                last_good = save_checkpoint(ck, out / f"epoch{epoch:03d}.ckpt")
            if evaluate_dev and dev_data:
                ev = {"epoch": epoch, "step": step, **evaluate(model, dev_data)}
                dev_log.append(ev)
                if out is not None:
                    with open(out / "dev.jsonl", "a" if epoch > 1 else "w") as fh:
                        fh.write(json.dumps(ev) + "\n")
                if log is not None:
                    log(f"epoch {epoch} dev loss {ev['total']:.4f} wer {ev['wer']:.4f}")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = average_checkpoints(epoch_ckpts) if epoch_ckpts else model_checkpoint(model, epoch=0, step=0)
    final_model = model_from_checkpoint(final)
    if out is not None:
        paths["final"] = str(save_checkpoint(final, out / "final.ckpt"))
        paths["metrics"] = str(out / "metrics.jsonl")
    return TrainResult(final_model, final, metrics, dev_log, step, opt.skipped, paths)
