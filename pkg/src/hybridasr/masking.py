"""Hybrid causal attention masks and modality-dependent convolution windows.

Speech positions 1..T see every speech position; text position i sees all
speech plus text positions up to i. Convolution windows never cross the
speech/text boundary: speech uses a symmetric window, text a causal one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HybridMask:
    attn: np.ndarray  # (N, N) int8, 1 = may attend
    boundary: int
    windows: list[tuple[int, int]]  # 1-based inclusive conv window per position


def build_attention_mask(T: int, U: int, kernel: int = 15, text_window: int = 8) -> HybridMask:
    if T < 1 or U < 1:
        raise ValueError(f"need T >= 1 and U >= 1, got T={T}, U={U}")
    n = T + U
    i = np.arange(1, n + 1)[:, None]
    j = np.arange(1, n + 1)[None, :]
    attn = (j <= T) | ((i > T) & (j > T) & (j <= i))
    windows = [conv_windows(p, T, kernel, text_window) for p in range(1, n + 1)]
    return HybridMask(attn.astype(np.int8), T, windows)


def conv_windows(i: int, T: int, kernel: int = 15, text_window: int = 8) -> tuple[int, int]:
    """Inclusive 1-based input range read by the convolution at position ``i``."""
    if kernel % 2 == 0 or text_window > kernel:
        raise ValueError(f"kernel must be odd and >= text_window (kernel={kernel}, text_window={text_window})")
    half = kernel // 2
    if i <= T:
        return max(1, i - half), min(T, i + half)
    return max(T + 1, i - text_window + 1), i


def batch_attention_mask(speech_lens, text_lens, tmax: int, umax: int) -> np.ndarray:
    """(B, tmax+umax, tmax+umax) boolean mask in the padded two-segment layout.

    Padded key positions are never attended; padded query rows follow the
    same rule as real rows of their segment so no row is empty.
    """
    speech_lens = np.asarray(speech_lens)
    text_lens = np.asarray(text_lens)
    n = tmax + umax
    idx = np.arange(n)
    is_text = idx >= tmax
    pos_in_seg = np.where(is_text, idx - tmax, idx)
    seg_len = np.where(is_text[None, :], text_lens[:, None], speech_lens[:, None])
    key_valid = pos_in_seg[None, :] < seg_len  # (B, n)
    allowed = ~is_text[None, :] | (is_text[:, None] & (idx[None, :] <= idx[:, None]))  # (n, n)
    return allowed[None] & key_valid[:, None, :]


def speech_conv_validity(speech_lens, tmax: int, kernel: int) -> np.ndarray:
    """(kernel, B, tmax) 0/1 taps for the symmetric speech window, zero on padding."""
    speech_lens = np.asarray(speech_lens)
    half = kernel // 2
    i = np.arange(tmax)[None, None, :]
    src = i + (np.arange(kernel) - half)[:, None, None]
    n = speech_lens[None, :, None]
    return ((src >= 0) & (src < n) & (i < n)).astype(np.float64)


def text_conv_validity(text_lens, umax: int, kernel: int, text_window: int) -> np.ndarray:
    """(kernel, B, umax) 0/1 taps for the causal text window of width ``text_window``."""
    text_lens = np.asarray(text_lens)
    half = kernel // 2
    off = (np.arange(kernel) - half)[:, None, None]
    i = np.arange(umax)[None, None, :]
    src = i + off
    n = text_lens[None, :, None]
    ok = (off <= 0) & (off > -text_window) & (src >= 0) & (i < n)
    return np.broadcast_to(ok, (kernel, len(text_lens), umax)).astype(np.float64)
