import warnings

import numpy as np
import pytest

from hybridasr.decoder import (beam_search, cache_speech, cached_step, corpus_wer, decode, decode_corpus,
                               default_max_len, greedy_decode, greedy_decode_batch, greedy_search, recompute_step,
                               wer)
from hybridasr.frontend import EOS

from conftest import toy_model
from oracles import all_sequences


def table_step(table, default):
    """Step function from a prefix -> probability table."""

    def step(prefixes):
        with np.errstate(divide="ignore"):
            return np.log(np.array([table.get(tuple(p), default) for p in prefixes], dtype=float))

    return step


def random_step(V, seed):
    """Deterministic pseudo-random next-token distribution per prefix."""

    def step(prefixes):
        rows = []
        for p in prefixes:
            r = np.random.default_rng([seed, len(p)] + list(p))
            z = r.normal(0, 2, V)
            rows.append(z - np.logaddexp.reduce(z))
        return np.array(rows)

    return step


# toy step functions (token 2 is end-of-sequence) --------------------------

TOY = {(): [0.5, 0.3, 0.2], (0,): [0.4, 0.4, 0.2], (1,): [0.05, 0.05, 0.9]}


def test_greedy_is_suboptimal_on_toy_distribution():
    step = table_step(TOY, [1 / 3] * 3)
    greedy = greedy_search(step, max_len=2)
    assert greedy.tokens[0] == 0 and not greedy.finished
    best = beam_search(step, beam=3, max_len=2)
    oracle = max(all_sequences(step, 3, 2, EOS))
    assert best.tokens + [EOS] == oracle[1] == [1, EOS]
    assert best.score == pytest.approx(np.log(0.27))
    assert best.score == pytest.approx(oracle[0])


@pytest.mark.parametrize("seed", range(10))
def test_wide_beam_finds_global_argmax(seed):
    step = random_step(3, seed)
    max_len = 3
    res = beam_search(step, beam=3 ** max_len, max_len=max_len)
    score, tokens = max(all_sequences(step, 3, max_len, EOS))
    assert res.tokens + [EOS] == tokens
    assert res.score == pytest.approx(score, abs=1e-12)


def test_unfinished_search_warns_and_flags():
    step = table_step({}, [0.6, 0.4, 0.0])
    with pytest.warns(UserWarning, match="end-of-sequence"):
        res = beam_search(step, beam=2, max_len=3)
    assert not res.finished and len(res.tokens) == 3


def test_finished_hypotheses_are_not_extended():
    step = table_step({(): [0.1, 0.1, 0.8]}, [0.5, 0.5, 0.0])
    res = beam_search(step, beam=2, max_len=4)
    assert res.tokens == [] and res.finished
    for h in res.beam:
        assert h.tokens.count(EOS) <= 1
        if h.finished:
            assert h.tokens[-1] == EOS


def test_bad_beam_arguments():
    with pytest.raises(ValueError):
        beam_search(random_step(3, 0), beam=0)
    with pytest.raises(ValueError):
        beam_search(random_step(3, 0), max_len=0)


@pytest.mark.parametrize("seed", range(10))
def test_beam_one_equals_greedy_on_step_functions(seed):
    step = random_step(4, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a, b = beam_search(step, 1, 6), greedy_search(step, 6)
    assert (a.tokens, a.finished) == (b.tokens, b.finished)
    assert a.score == pytest.approx(b.score, abs=1e-12)


# model-backed decoding ---------------------------------------------------

def _feats(seed, T0=16):
    return np.random.default_rng(seed).normal(size=(T0, 8))


def test_cache_shape_and_contents_match_full_forward():
    model = toy_model("moe-modality")
    feats = _feats(0)
    cache = cache_speech(model, feats)
    assert cache.states.shape == (2, 4, 8)
    trace = {}
    model(feats[None], [16], np.array([[1, 4, 5]]), [3], trace=trace)
    for layer, state in zip(cache.layers, trace["speech_state"]):
        np.testing.assert_array_equal(layer.state, state)
    np.testing.assert_array_equal(cache.final, trace["speech_out"][-1][0])


def test_caches_are_independent_and_read_only():
    model = toy_model("dense")
    a, b = cache_speech(model, _feats(1)), cache_speech(model, _feats(2))
    assert not np.shares_memory(a.layers[0].keys, b.layers[0].keys)
    assert not np.array_equal(a.states, b.states)
    with pytest.raises(ValueError):
        a.layers[0].keys[...] = 0


@pytest.mark.parametrize("mode", ["dense", "moe-single", "moe-modality"])
def test_cached_step_equals_recompute_bit_exact(mode):
    model = toy_model(mode)
    feats = _feats(3)
    cached = cached_step(model, cache_speech(model, feats))
    full = recompute_step(model, feats)
    prefixes = [[4, 5, 6], [5, 5, 2], [6, 4, 4]]
    np.testing.assert_array_equal(cached(prefixes), full(prefixes))
    np.testing.assert_array_equal(cached([[]]), full([[]]))


@pytest.mark.parametrize("seed", range(4))
def test_cached_decode_equals_recompute_decode(seed):
    model = toy_model("moe-modality", seed=seed)
    feats = _feats(10 + seed, T0=12 + 4 * seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = decode(model, feats, beam=4, cached=True)
        b = decode(model, feats, beam=4, cached=False)
    assert a.tokens == b.tokens and a.score == b.score


@pytest.mark.parametrize("seed", range(5))
def test_model_beam_one_equals_greedy(seed):
    model = toy_model("dense", seed=seed)
    feats = _feats(20 + seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert decode(model, feats, beam=1).tokens == greedy_decode(model, feats).tokens


def test_hypothesis_scores_never_increase():
    model = toy_model("moe-single")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = decode(model, _feats(5), beam=4)
    for h in res.beam:
        assert all(b <= a for a, b in zip(h.scores, h.scores[1:]))
        assert h.scores[-1] == h.score


@pytest.mark.parametrize("seed", range(6))
def test_wider_beam_does_not_lower_returned_score(seed):
    model = toy_model("dense", seed=seed)
    feats = _feats(30 + seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scores = [decode(model, feats, beam=b, max_len=4).score for b in (1, 2, 4, 8)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:])), scores


def test_batched_greedy_matches_single_utterance_greedy():
    model = toy_model("moe-modality")
    feats = [_feats(40, 12), _feats(41, 20), _feats(42, 16)]
    padded = np.zeros((3, 20, 8))
    for i, f in enumerate(feats):
        padded[i, : len(f)] = f
    batch = greedy_decode_batch(model, padded, [12, 20, 16], max_len=6)
    for f, got in zip(feats, batch):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert got == greedy_decode(model, f, max_len=6).tokens


def test_decode_restores_training_mode():
    model = toy_model("dense").train()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        decode(model, _feats(6), beam=2)
    assert model.training


def test_decode_corpus_keeps_order():
    model = toy_model("dense")
    feats = [_feats(50), _feats(51)]
    out = decode_corpus(model, feats, beam=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert [r.tokens for r in out] == [decode(model, f, beam=2).tokens for f in feats]


def test_default_max_len():
    assert default_max_len(4) == 4
    assert default_max_len(13) == 8


def test_wer_examples():
    assert wer("a b c".split(), "a b c".split()) == 0.0
    assert wer("a b c".split(), "a c".split()) == pytest.approx(1 / 3)
    assert wer("a b c d".split(), []) == 1.0
    assert wer([1, 2], [1, 2, 3, 4]) == 1.0
    with pytest.raises(ValueError):
        wer([], [1])
    assert corpus_wer([[1, 2, 3], [4]], [[1, 3], [5]]) == pytest.approx(2 / 4)
