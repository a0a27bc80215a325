import json
import math
import warnings

import numpy as np
import pytest

from hybridasr import trainer
from hybridasr.config import TrainConfig, toy_config
from hybridasr.conformer import DecoderOnlyConformer
from hybridasr.frontend import EOS, SOS, UNK, subsampled_length
from hybridasr.io import load_checkpoint
from hybridasr.objectives import objectives_for
from hybridasr.tensor import Tensor, backward, no_grad
from hybridasr.trainer import (Adam, average_checkpoints, collate, generate_synthetic, make_dataset, model_checkpoint,
                               noam_lr, spec_augment, token_patterns, word_dropout)


def tiny(mode="dense", **kw):
    base = dict(train_utts=24, dev_utts=6, utt_tokens=3, batch_size=8, epochs=2, warmup=10, avg_last=2,
                precision="float32", word_dropout=0.125, specaug_freq_masks=1, specaug_time_masks=1,
                specaug_freq_width=2, specaug_time_width=2)
    base.update(kw)
    return toy_config(mode, **base)


# schedule ----------------------------------------------------------------

def test_noam_examples():
    assert noam_lr(400, 400, 1.5e-3) == 1.5e-3
    assert noam_lr(200, 400, 1.5e-3) == pytest.approx(0.75e-3, rel=1e-15)
    assert noam_lr(1600, 400, 1.5e-3) == pytest.approx(0.75e-3, rel=1e-15)
    with pytest.raises(ValueError):
        noam_lr(0, 400, 1.0)


def test_noam_peak_is_the_maximum():
    lrs = [noam_lr(s, 25, 2.0) for s in range(1, 200)]
    assert max(lrs) == 2.0 and lrs.index(2.0) == 24


# optimizer ---------------------------------------------------------------

def _adam(values, **kw):
    p = Tensor(np.array(values, dtype=np.float64))
    return p, Adam({"p": p}, **kw)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p, opt = _adam([1.0, -2.0])
    opt.step({"p": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    opt.step({"p": np.array([0.5, -1.0])}, 0.1)
    m, v = opt.m["p"].copy(), opt.v["p"].copy()
    opt.step({"p": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(opt.m["p"], 0.9 * m)
    np.testing.assert_array_equal(opt.v["p"], 0.999 * v)


def test_adam_first_step_is_normalized_gradient():
    g = np.array([0.3, -4.0, 1e-3])
    p, opt = _adam([0.0, 0.0, 0.0])
    opt.step({"p": g}, 0.01)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-9), rtol=1e-12)


def test_adam_without_momentum_is_sign_step():
    p, opt = _adam([0.0, 0.0], beta1=0.0, beta2=0.0, eps=0.0)
    for g in ([2.0, -0.1], [-5.0, 3.0]):
        before = p.data.copy()
        opt.step({"p": np.array(g)}, 0.5)
        np.testing.assert_allclose(p.data - before, -0.5 * np.sign(g), rtol=1e-15)


def test_adam_skips_non_finite_gradient():
    p, opt = _adam([1.0, 1.0])
    assert opt.step({"p": np.array([np.nan, 1.0])}, 0.1) is False
    assert opt.skipped == 1 and opt.t == 0
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


# augmentation ------------------------------------------------------------

def test_word_dropout_extremes_and_specials():
    tokens = np.array([SOS, 4, 5, 6, EOS])
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(word_dropout(tokens, 0.0, rng), tokens)
    np.testing.assert_array_equal(word_dropout(tokens, 1.0, rng), [SOS, UNK, UNK, UNK, EOS])


def test_word_dropout_rate():
    tokens = np.random.default_rng(1).integers(4, 32, 100_000)
    out = word_dropout(tokens, 0.125, np.random.default_rng(2))
    assert abs(np.mean(out == UNK) - 0.125) < 0.01


def test_spec_augment_identity_and_full_mask():
    x = np.random.default_rng(3).normal(size=(12, 6)) + 10
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(spec_augment(x, 0, 2, 0, 3, rng), x)
    assert np.all(spec_augment(x, 0, 2, 1, 12, rng) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_spec_augment_counts(seed):
    T, D = 20, 10
    x = np.ones((T, D))
    y = spec_augment(x, 2, 3, 2, 4, np.random.default_rng(seed))
    cols = np.flatnonzero(np.all(y == 0, axis=0))
    rows = np.flatnonzero(np.all(y == 0, axis=1))
    assert 3 <= len(cols) <= 6 and 4 <= len(rows) <= 8
    assert np.sum(y == 0) == len(cols) * T + len(rows) * D - len(cols) * len(rows)


def test_spec_augment_rejects_oversized_mask():
    with pytest.raises(ValueError):
        spec_augment(np.ones((5, 4)), 1, 5, 0, 1, np.random.default_rng(0))


# synthetic data ----------------------------------------------------------

def test_synthetic_is_deterministic():
    a = generate_synthetic(7, 4, 32, sigma=0.0)
    b = generate_synthetic(7, 4, 32, sigma=0.0)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    others = [generate_synthetic(seed, 4, 32, sigma=0.0).tokens for seed in range(8, 12)]
    assert any(not np.array_equal(t, a.tokens) for t in others)


def test_synthetic_lengths():
    s = generate_synthetic(0, 3, 32, frames_per_token=8)
    assert s.features.shape == (24, 16)
    assert subsampled_length(24) == 6
    assert s.tokens[-1] == EOS and len(s.symbols) == 3
    assert np.all(s.symbols >= 4) and np.all(s.symbols[1:] != s.symbols[:-1])


@pytest.mark.parametrize("sigma", [0.0, 0.1])
def test_nearest_pattern_recovers_tokens(sigma):
    pats = token_patterns(32, 16)[4:]
    for seed in range(20):
        s = generate_synthetic(seed, 6, 32, 8, sigma)
        d = ((s.features[:, None, :] - pats[None]) ** 2).sum(-1)
        frame_ids = np.argmin(d, axis=1) + 4
        np.testing.assert_array_equal(frame_ids.reshape(6, 8)[:, 0], s.symbols)
        if sigma == 0:
            assert np.all(frame_ids.reshape(6, 8) == s.symbols[:, None])


def test_rejects_bad_frames_per_token():
    with pytest.raises(ValueError):
        generate_synthetic(0, 3, 32, frames_per_token=6)


def test_datasets_split_and_repeat():
    cfg = tiny()
    a, b = make_dataset(cfg, "train"), make_dataset(cfg, "train")
    dev = make_dataset(cfg, "dev")
    assert len(a) == 24 and len(dev) == 6
    assert trainer.dataset_hash(a) == trainer.dataset_hash(b)
    assert trainer.dataset_hash(a[:6]) != trainer.dataset_hash(dev)


def test_collate_layout():
    samples = [generate_synthetic(i, 2 + i, 7, 4, 0.1, 8) for i in range(3)]
    batch = collate(samples)
    assert batch.feats.shape == (3, 16, 8)
    assert batch.feat_lens.tolist() == [8, 12, 16]
    assert batch.text_lens.tolist() == [3, 4, 5]
    for b, s in enumerate(samples):
        u = len(s.tokens)
        assert batch.text_in[b, 0] == SOS
        np.testing.assert_array_equal(batch.text_in[b, 1:u], s.tokens[:-1])
        np.testing.assert_array_equal(batch.text_out[b, :u], s.tokens)
        assert np.all(batch.text_out[b, u:] == 0)


# checkpoints -------------------------------------------------------------

def _ckpt(seed, cfg=None):
    cfg = cfg or tiny()
    return model_checkpoint(DecoderOnlyConformer(cfg, seed=seed))


def test_average_of_copies_is_identity():
    c = _ckpt(0)
    avg = average_checkpoints([c, c, c])
    for n, a in c.params.items():
        np.testing.assert_array_equal(avg.params[n], a)
    assert avg.optimizer == {}


def test_average_of_two_is_elementwise_mean():
    a, b = _ckpt(0), _ckpt(1)
    avg = average_checkpoints([a, b])
    for n in a.params:
        np.testing.assert_allclose(avg.params[n], (a.params[n].astype(np.float64) + b.params[n]) / 2, rtol=1e-7)


def test_average_is_order_invariant():
    cs = [_ckpt(i) for i in range(4)]
    x = average_checkpoints(cs)
    y = average_checkpoints(cs[::-1])
    z = average_checkpoints([cs[2], cs[0], cs[3], cs[1]])
    for n in x.params:
        np.testing.assert_array_equal(x.params[n], y.params[n])
        np.testing.assert_array_equal(x.params[n], z.params[n])


def test_average_rejects_mismatched_fingerprints():
    with pytest.raises(ValueError, match="fingerprint"):
        average_checkpoints([_ckpt(0), _ckpt(0, tiny(heads=4))])


# training ----------------------------------------------------------------

def test_zero_epochs_returns_initial_checkpoint(tmp_path):
    cfg = tiny(epochs=0)
    res = trainer.train(cfg, tmp_path)
    fresh = DecoderOnlyConformer(cfg)
    for n, p in fresh.named_parameters():
        np.testing.assert_array_equal(res.checkpoint.params[n], p.data)
    assert res.steps == 0 and res.metrics == []
    assert (tmp_path / "final.ckpt").exists()


def test_initial_ce_is_near_log_vocab():
    cfg = TrainConfig()
    model = DecoderOnlyConformer(cfg).eval()
    batch = collate(make_dataset(cfg.replace(train_utts=16), "train")[:16])
    with no_grad():
        losses, _ = objectives_for(model, batch)
    assert abs(losses.ce.item() - math.log(32)) < 0.1 * math.log(32)


def test_training_writes_artifacts_and_metrics(tmp_path):
    cfg = tiny("moe-modality")
    res = trainer.train(cfg, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["dev.jsonl", "epoch000.ckpt", "epoch001.ckpt", "epoch002.ckpt", "final.ckpt", "metrics.jsonl"]
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == res.steps == 6
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "epoch", "lr", "ce", "ctc", "balance", "total", "skipped", "load", "prob"}
    assert set(rec["load"]) == {"speech", "text"}
    assert sum(rec["load"]["speech"]) == pytest.approx(1.0)
    assert rec["total"] == pytest.approx(rec["ce"] + 0.3 * rec["ctc"] + 0.1 * rec["balance"], rel=1e-5)
    final = load_checkpoint(tmp_path / "final.ckpt")
    assert final.meta["averaged"] == 2 and final.meta["epochs"] == [1, 2]
    assert len((tmp_path / "dev.jsonl").read_text().splitlines()) == 2


def test_training_is_deterministic(tmp_path):
    cfg = tiny("moe-single")
    trainer.train(cfg, tmp_path / "a", evaluate_dev=False)
    trainer.train(cfg, tmp_path / "b", evaluate_dev=False)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_different_seeds_differ():
    a = trainer.train(tiny(seed=1), max_steps=2, evaluate_dev=False)
    b = trainer.train(tiny(seed=2), max_steps=2, evaluate_dev=False)
    assert a.metrics[0]["total"] != b.metrics[0]["total"]


def test_divergence_aborts_and_keeps_last_good(tmp_path):
    cfg = tiny(peak_lr=1e300, warmup=1, epochs=3)
    with np.errstate(all="ignore"), pytest.raises(trainer.TrainingDiverged) as info:
        trainer.train(cfg, tmp_path, evaluate_dev=False)
    assert info.value.last_good is not None and info.value.last_good.exists()
    load_checkpoint(info.value.last_good)


def test_fixed_batch_loss_decreases_without_augmentation():
    cfg = tiny(word_dropout=0.0, specaug_freq_masks=0, specaug_time_masks=0, dropout=0.0)
    model = DecoderOnlyConformer(cfg)
    named = dict(model.named_parameters())
    opt = Adam(named)
    batch = collate(make_dataset(cfg, "train")[:8])
    losses = []
    for step in range(1, 51):
        model.zero_grad()
        total = objectives_for(model, batch)[0].total
        losses.append(total.item())
        backward(total, named.values())
        opt.step({n: p.grad for n, p in named.items()}, 1e-3)
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    if rises:
        warnings.warn(f"fixed-batch loss rose on {rises} of 49 steps")
    assert losses[-1] < losses[0]
