import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridasr.config import toy_config
from hybridasr.frontend import Frontend, Vocab, assemble, positional_encoding, sinusoid_table, subsampled_length
from hybridasr.tensor import Tensor


@pytest.fixture
def frontend():
    return Frontend(toy_config(), np.random.default_rng(0), np.float64)


@pytest.mark.parametrize("t0,t", [(16, 4), (10, 3), (4, 1), (24, 6)])
def test_subsample_length_examples(frontend, t0, t):
    out, lens = frontend.subsample(np.random.default_rng(0).normal(size=(t0, 8)))
    assert out.shape[:2] == (1, t)
    assert lens.tolist() == [t]


@given(st.integers(4, 64))
def test_subsample_length_formula(t0):
    assert subsampled_length(t0) == math.ceil(math.ceil(t0 / 2) / 2)


def test_subsample_rejects_short_input(frontend):
    with pytest.raises(ValueError, match="at least 4"):
        frontend.subsample(np.zeros((3, 8)))


def test_subsample_zero_weights_give_zero_output(frontend):
    for p in (frontend.conv1_w, frontend.conv1_b, frontend.conv2_w, frontend.conv2_b):
        p.data[...] = 0
    out, _ = frontend.subsample(np.random.default_rng(1).normal(size=(12, 8)))
    assert np.all(out.data == 0)


def test_padded_frames_do_not_change_valid_outputs(frontend):
    r = np.random.default_rng(2)
    short = r.normal(size=(10, 8))
    padded = np.zeros((2, 17, 8))
    padded[0, :10] = short
    padded[1] = r.normal(size=(17, 8))
    alone, _ = frontend.subsample(short)
    batch, lens = frontend.subsample(padded, [10, 17])
    assert lens.tolist() == [3, 5]
    np.testing.assert_array_equal(batch.data[0, :3], alone.data[0])
    assert np.all(batch.data[0, 3:] == 0)


def test_project_speech_examples(frontend):
    d = frontend.proj.w.shape[0]
    r = np.random.default_rng(3)
    s = Tensor(r.normal(size=(5, d)))
    frontend.proj.b.data[...] = 0
    frontend.proj.w.data[...] = 0
    frontend.proj.b.data[...] = np.arange(8.0)
    assert np.all(frontend.project_speech(s).data == np.arange(8.0))
    w, b = r.normal(size=(d, 8)), r.normal(size=8)
    frontend.proj.w.data[...] = w
    frontend.proj.b.data[...] = b
    out = frontend.project_speech(s).data
    for i in range(5):
        np.testing.assert_allclose(out[i], s.data[i] @ w + b, atol=1e-12)


def test_project_speech_identity():
    cfg = toy_config(sub_channels=4, feat_dim=8, d_model=8)
    fe = Frontend(cfg, np.random.default_rng(0), np.float64)
    assert fe.proj.w.shape == (8, 8)
    fe.proj.w.data[...] = np.eye(8)
    fe.proj.b.data[...] = 0
    s = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
    np.testing.assert_array_equal(fe.project_speech(s).data, s.data)


def test_embedding_lookup(frontend):
    ids = np.random.default_rng(4).integers(0, 7, 100)
    np.testing.assert_array_equal(frontend.embed_text(ids).data, frontend.embed.data[ids])
    same = frontend.embed_text(np.array([5, 5])).data
    np.testing.assert_array_equal(same[0], same[1])
    frontend.embed.data[...] = 0
    assert np.all(frontend.embed_text(ids).data == 0)


def test_embedding_rejects_unknown_id(frontend):
    with pytest.raises(ValueError):
        frontend.embed_text(np.array([7]))


def test_sinusoid_pattern():
    d = 8
    pe = positional_encoding(np.arange(1, 6), d)
    for pos in range(1, 6):
        for k in range(d // 2):
            angle = pos / 10000 ** (2 * k / d)
            assert pe[pos - 1, 2 * k] == pytest.approx(math.sin(angle), abs=1e-14)
            assert pe[pos - 1, 2 * k + 1] == pytest.approx(math.cos(angle), abs=1e-14)


def test_sinusoid_rows_independent_of_table_size():
    np.testing.assert_array_equal(sinusoid_table(5, 16)[5], sinusoid_table(500, 16)[5])


def test_assemble_layout_and_boundary():
    speech, text = Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8)))
    seq = assemble(speech, text)
    assert seq.vectors.shape == (1, 5, 8)
    assert seq.boundary.tolist() == [3]
    assert seq.modality() == ["speech"] * 3 + ["text"] * 2
    # zero inputs leave the pure encoding; text row 1 carries position 4
    np.testing.assert_array_equal(seq.vectors.data[0], positional_encoding(np.arange(1, 6), 8))
    np.testing.assert_array_equal(seq.text.data[0, 0], positional_encoding([4], 8)[0])


@pytest.mark.parametrize("T", [1, 5, 17])
def test_first_text_position_continues_speech_positions(T):
    seq = assemble(Tensor(np.zeros((T, 6))), Tensor(np.zeros((3, 6))))
    np.testing.assert_array_equal(seq.text.data[0, 0], positional_encoding([T + 1], 6)[0])
    assert seq.vectors.shape[1] == T + 3


def test_assemble_padded_batch_uses_own_boundary():
    seq = assemble(Tensor(np.zeros((2, 4, 6))), Tensor(np.zeros((2, 2, 6))), speech_lens=[2, 4])
    np.testing.assert_array_equal(seq.text.data[0, 0], positional_encoding([3], 6)[0])
    np.testing.assert_array_equal(seq.text.data[1, 0], positional_encoding([5], 6)[0])


def test_vocab_round_trip():
    v = Vocab(32)
    assert len(v) == 32 and v.first_symbol == 4
    words = v.to_words(range(4, 32))
    assert len(set(words)) == 28
    assert v.from_words(words + ["nope"]) == list(range(4, 32)) + [3]
