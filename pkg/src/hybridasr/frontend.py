"""Speech subsampling, text embedding and assembly of the unified sequence."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Linear, Module, param
from .tensor import Tensor

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
_SYMBOLS = "abcdefghijklmnopqrstuvwxyz'_"


class Vocab:
    """Character-level vocabulary: four special ids followed by symbols."""

    def __init__(self, size: int):
        if size < 5:
            raise ValueError("vocabulary needs at least one non-special symbol")
        self.size = size
        n = size - len(SPECIALS)
        syms = list(_SYMBOLS[:n]) + [f"t{i}" for i in range(len(_SYMBOLS), n)]
        self.itos = list(SPECIALS) + syms
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self):
        return self.size

    @property
    def first_symbol(self) -> int:
        return len(SPECIALS)

    def to_words(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def from_words(self, words) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]


def subsampled_length(t0: int) -> int:
    """Frames left after two stride-2 convolutions with padding 1."""
    half = (t0 + 1) // 2
    return (half + 1) // 2


_PE_CAPACITY = 8192


@functools.lru_cache(maxsize=None)
def _master_table(d: int, dtype_name: str, capacity: int) -> np.ndarray:
    pos = np.arange(capacity + 1, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((capacity + 1, d))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    pe = pe.astype(dtype_name)
    pe.flags.writeable = False
    return pe


def sinusoid_table(n_positions: int, d: int, dtype=np.float64) -> np.ndarray:
    """Row ``p`` holds the encoding of 1-based position ``p`` (row 0 unused).

    Rows come from one cached table so a position always gets bit-identical
    values, whatever table size a caller asks for.
    """
    capacity = max(_PE_CAPACITY, n_positions)
    return _master_table(d, np.dtype(dtype).name, capacity)[: n_positions + 1]


def positional_encoding(positions, d: int, dtype=np.float64) -> np.ndarray:
    positions = np.asarray(positions)
    return sinusoid_table(int(positions.max(initial=1)), d, dtype)[positions]


def _time_mask(lengths, n: int, dtype) -> np.ndarray:
    return (np.arange(n)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


@dataclass
class UnifiedSequence:
    """Speech and text streams of a batch of unified sequences.

    Speech rows are padded to ``speech.shape[1]`` and text rows to
    ``text.shape[1]``; utterance ``b`` occupies speech rows ``[0, speech_lens[b])``
    (positions 1..T) and text rows ``[0, text_lens[b])`` (positions T+1..T+U).
    """

    speech: Tensor
    text: Tensor
    speech_lens: np.ndarray
    text_lens: np.ndarray

    @property
    def boundary(self) -> np.ndarray:
        return self.speech_lens

    @property
    def vectors(self) -> Tensor:
        """Concatenated (B, Tmax+Umax, D) layout; equals (T+U)xD when unpadded."""
        return ops.concat([self.speech, self.text], axis=1)

    def modality(self, b: int = 0) -> list[str]:
        T, U = int(self.speech_lens[b]), int(self.text_lens[b])
        return ["speech"] * T + ["text"] * U


def assemble(speech: Tensor, text: Tensor, speech_lens=None, text_lens=None) -> UnifiedSequence:
    """Add sinusoidal encodings on one shared position axis: speech 1..T, text T+1..T+U."""
    if speech.ndim == 2:
        speech = ops.reshape(speech, (1,) + speech.shape)
        text = ops.reshape(text, (1,) + text.shape)
    B, tmax, d = speech.shape
    umax = text.shape[1]
    speech_lens = np.full(B, tmax) if speech_lens is None else np.asarray(speech_lens)
    text_lens = np.full(B, umax) if text_lens is None else np.asarray(text_lens)
    dtype = speech.dtype
    s_pos = np.broadcast_to(np.arange(1, tmax + 1), (B, tmax))
    t_pos = speech_lens[:, None] + np.arange(1, umax + 1)[None, :]
    table = sinusoid_table(int(max(tmax, t_pos.max(initial=1))), d, dtype)
    s = ops.add(speech, Tensor(table[s_pos]))
    t = ops.add(text, Tensor(table[t_pos]))
    return UnifiedSequence(s, t, speech_lens, text_lens)


class Frontend(Module):
    """Two stride-2 3x3 convolutions with ReLU, a linear projection and the token embedding."""

    def __init__(self, cfg, rng: np.random.Generator, dtype):
        c = cfg.sub_channels
        self.conv1_w = param(rng.normal(0, np.sqrt(2.0 / 9), (3, 3, 1, c)), dtype)
        self.conv1_b = param(np.zeros(c), dtype)
        self.conv2_w = param(rng.normal(0, np.sqrt(2.0 / (9 * c)), (3, 3, c, c)), dtype)
        self.conv2_b = param(np.zeros(c), dtype)
        self.d_sub = c * subsampled_length(cfg.feat_dim)
        self.proj = Linear(self.d_sub, cfg.d_model, rng, dtype)
        self.embed = param(rng.normal(0, 1.0, (cfg.vocab_size, cfg.d_model)), dtype)
        self.dtype = dtype

    def subsample(self, feats, lengths=None) -> tuple[Tensor, np.ndarray]:
        """(B, T0, D_a) features -> (B, T, D_sub) with T = ceil(ceil(T0/2)/2)."""
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=self.dtype))
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        B, t0, _ = x.shape
        lengths = np.full(B, t0) if lengths is None else np.asarray(lengths)
        if lengths.min() < 4:
            raise ValueError(f"need at least 4 input frames, got {int(lengths.min())}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("acoustic features contain non-finite values")
        h = ops.reshape(x, x.shape + (1,))
        for w, b in ((self.conv1_w, self.conv1_b), (self.conv2_w, self.conv2_b)):
            h = ops.relu(ops.conv2d(h, w, b, stride=2, pad=1))
            lengths = (lengths + 1) // 2
            # frames past each utterance's end must look like zero padding to the next layer
            if lengths.min() < h.shape[1]:
                h = ops.mul_const(h, _time_mask(lengths, h.shape[1], h.dtype)[:, :, None, None])
        B, T, F, C = h.shape
        return ops.reshape(h, (B, T, F * C)), lengths

    def project_speech(self, s: Tensor) -> Tensor:
        return self.proj(s)

    def embed_text(self, ids) -> Tensor:
        return ops.embedding(self.embed, ids)

    def __call__(self, feats, feat_lens, text_in, text_lens) -> UnifiedSequence:
        s, speech_lens = self.subsample(feats, feat_lens)
        return assemble(self.project_speech(s), self.embed_text(text_in), speech_lens, text_lens)
