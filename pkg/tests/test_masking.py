import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridasr.masking import (batch_attention_mask, build_attention_mask, conv_windows, speech_conv_validity,
                               text_conv_validity)


def test_single_speech_single_text():
    assert build_attention_mask(1, 1).attn.tolist() == [[1, 0], [1, 1]]


def test_three_speech_two_text():
    m = build_attention_mask(3, 2)
    assert m.boundary == 3
    assert m.attn.tolist() == [
        [1, 1, 1, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1],
    ]


@given(st.integers(1, 12), st.integers(1, 12))
def test_mask_four_cases(T, U):
    m = build_attention_mask(T, U).attn
    assert np.all(m[:T, :T] == 1)
    assert np.all(m[:T, T:] == 0)
    assert np.all(m[T:, :T] == 1)
    np.testing.assert_array_equal(m[T:, T:], np.tril(np.ones((U, U), dtype=np.int8)))
    assert np.all(m.sum(axis=1) > 0)


@pytest.mark.parametrize("T,U", [(0, 1), (1, 0)])
def test_empty_segment_rejected(T, U):
    with pytest.raises(ValueError):
        build_attention_mask(T, U)


def test_window_examples():
    T = 10
    assert conv_windows(1, T) == (1, 8)
    assert conv_windows(T + 1, T) == (T + 1, T + 1)
    lo, hi = conv_windows(T + 9, T)
    assert (lo, hi) == (T + 2, T + 9) and hi - lo + 1 == 8
    assert conv_windows(5, T) == (1, 10)


@given(st.integers(1, 30), st.integers(1, 30))
def test_windows_never_cross_boundary(T, U):
    for i in range(1, T + U + 1):
        lo, hi = conv_windows(i, T)
        assert lo <= i <= hi
        if i <= T:
            assert hi <= T
        else:
            assert lo > T and hi == i and hi - lo < 8


def test_bad_kernel_rejected():
    with pytest.raises(ValueError):
        conv_windows(1, 3, kernel=4)


def test_mask_windows_recorded():
    m = build_attention_mask(3, 2)
    assert m.windows == [(1, 3), (1, 3), (1, 3), (4, 4), (4, 5)]


def test_batch_mask_matches_single_mask_on_valid_rows():
    lens_s, lens_t = np.array([3, 5]), np.array([4, 2])
    full = batch_attention_mask(lens_s, lens_t, 5, 4)
    for b in range(2):
        T, U = lens_s[b], lens_t[b]
        idx = np.r_[np.arange(T), 5 + np.arange(U)]
        np.testing.assert_array_equal(full[b][np.ix_(idx, idx)], build_attention_mask(T, U).attn.astype(bool))
        # padded keys are never attended
        pad = np.r_[np.arange(T, 5), 5 + np.arange(U, 4)]
        assert not full[b][:, pad].any()
        assert full[b].any(axis=1).all()


def test_conv_validity_tables_match_windows():
    K, W = 15, 8
    s = speech_conv_validity([6], 6, K)
    t = text_conv_validity([10], 10, K, W)
    T = 6
    for i in range(1, T + 1):
        lo, hi = conv_windows(i, T, K, W)
        taps = [i + k - K // 2 for k in range(K) if s[k, 0, i - 1]]
        assert taps == list(range(lo, hi + 1))
    for u in range(1, 11):
        i = T + u
        lo, hi = conv_windows(i, T, K, W)
        taps = [i + k - K // 2 for k in range(K) if t[k, 0, u - 1]]
        assert taps == list(range(lo, hi + 1))
