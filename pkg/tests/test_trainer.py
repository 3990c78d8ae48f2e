import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crnet.backprop import Gradients
from crnet.model import ModelConfig, init_params
from crnet.trainer import (
    AdamState, StepRejected, TrainConfig, TrainingAborted, adam_step, batch_loss_and_grad,
    clip_global_norm, evaluate, group_scales, ingest_corpus, load_checkpoint, lr_at, sample_batch,
    save_checkpoint, train,
)

SMALL = ModelConfig.uniform(3, 16, 24, 4, heads=2, vocab=256, seq_len=16)


@pytest.fixture(scope="module")
def corpus(corpus_bytes):
    return ingest_corpus(corpus_bytes[:40_000], SMALL.seq_len)


class TestSchedule:
    def test_shape(self):
        tc = TrainConfig(total_steps=100, peak_lr=1.0)
        assert lr_at(0, tc) == 0.0
        assert lr_at(10, tc) == pytest.approx(1.0)
        assert lr_at(100, tc) == pytest.approx(0.1)
        assert lr_at(5, tc) == pytest.approx(0.5)

    @given(st.integers(10, 1000), st.floats(0, 1))
    def test_bounded(self, total, frac):
        tc = TrainConfig(total_steps=total, peak_lr=2e-3)
        lr = lr_at(frac * total, tc)
        assert 0 <= lr <= 2e-3 + 1e-15

    @given(st.integers(20, 500))
    def test_decay_monotone_after_warmup(self, total):
        tc = TrainConfig(total_steps=total)
        steps = np.arange(math.ceil(0.1 * total), total + 1)
        lrs = [lr_at(s, tc) for s in steps]
        assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))

    @given(st.integers(10, 5000), st.floats(1e-5, 1.0))
    def test_continuous_at_warmup_end(self, total, peak):
        tc = TrainConfig(total_steps=total, peak_lr=peak)
        warm = 0.1 * total
        assert abs(lr_at(warm - 1e-9, tc) - lr_at(warm, tc)) <= 1e-12 * peak + peak * 1e-9 / warm

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(101, TrainConfig(total_steps=100))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(total_steps=0)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = init_params(SMALL, 0)
        g = Gradients.zeros_like(p)
        rng = np.random.default_rng(0)
        for v in g.tensors.values():
            v[...] = rng.normal(size=v.shape)
        before = p.copy()
        used = adam_step(p, g, AdamState.zeros_like(p), 1e-2, group_scales(0.25))
        assert used["W"] == 1e-2 and used["A"] == used["B"] == used["beta"] == 2.5e-3
        w = "W1.Q"
        np.testing.assert_allclose(before.tensors[w] - p.tensors[w], 1e-2 * np.sign(g[w]), rtol=1e-5)

    def test_nonfinite_rejected_without_change(self):
        p = init_params(SMALL, 0)
        g = Gradients.zeros_like(p)
        g.tensors["B2.up"][0, 0] = np.nan
        before = p.to_vector()
        state = AdamState.zeros_like(p)
        with pytest.raises(StepRejected):
            adam_step(p, g, state, 1e-3)
        np.testing.assert_array_equal(p.to_vector(), before)
        assert state.t == 0

    @given(st.floats(0.01, 10))
    def test_clip(self, max_norm):
        p = init_params(SMALL, 0)
        g = Gradients.zeros_like(p)
        g.tensors["embed"][...] = 1.0
        norm = clip_global_norm(g, max_norm)
        assert norm == pytest.approx(math.sqrt(g.tensors["embed"].size))
        assert g.global_norm() <= max_norm * (1 + 1e-12)


class TestData:
    def test_split(self, corpus):
        assert corpus.size == 40_000
        assert corpus.val.size == 4_000

    def test_bytes_are_tokens(self):
        c = ingest_corpus(b"abc" * 20, 4)
        np.testing.assert_array_equal(c.train[:3], [97, 98, 99])

    def test_histogram_matches_file(self, tmp_path, corpus_bytes):
        path = tmp_path / "c.txt"
        path.write_bytes(corpus_bytes[:5000])
        c = ingest_corpus(path, 16)
        hist = np.bincount(np.concatenate([c.train, c.val]), minlength=256)
        np.testing.assert_array_equal(hist, np.bincount(np.frombuffer(corpus_bytes[:5000], np.uint8), minlength=256))

    def test_too_small(self):
        with pytest.raises(ValueError, match="at least"):
            ingest_corpus(b"abc", 16)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest_corpus(tmp_path / "nope.txt", 16)

    def test_sample_deterministic(self, corpus):
        a = sample_batch(corpus.train, 4, 16, 0, 3)
        b = sample_batch(corpus.train, 4, 16, 0, 3)
        c = sample_batch(corpus.train, 4, 16, 0, 4)
        assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))
        assert not all(np.array_equal(x, y) for x, y in zip(a[0], c[0]))
        np.testing.assert_array_equal(a[0][0][1:], a[1][0][:-1])

    def test_evaluate_leaves_params(self, corpus):
        p = init_params(SMALL, 0)
        before = p.to_vector()
        loss = evaluate(p, corpus.val, 16)
        assert loss == pytest.approx(math.log(256), rel=0.05)
        np.testing.assert_array_equal(p.to_vector(), before)

    def test_batch_grad_is_mean(self, corpus):
        p = init_params(SMALL, 1)
        xs, ys = sample_batch(corpus.train, 2, 16, 0, 0)
        loss, g = batch_loss_and_grad(p, xs, ys)
        l0, g0 = batch_loss_and_grad(p, xs[:1], ys[:1])
        l1, g1 = batch_loss_and_grad(p, xs[1:], ys[1:])
        assert loss == pytest.approx((l0 + l1) / 2)
        np.testing.assert_allclose(g.to_vector(), (g0.to_vector() + g1.to_vector()) / 2, atol=1e-15)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        p = init_params(SMALL, 2)
        state = AdamState.zeros_like(p)
        state.m["A2.Q"][...] = 0.5
        save_checkpoint(p, state, 17, tmp_path)
        ck = load_checkpoint(tmp_path)
        assert ck.step == 17 and ck.params.config == SMALL
        np.testing.assert_array_equal(ck.params.to_vector(), p.to_vector())
        assert np.all(ck.state.m["A2.Q"] == 0.5)

    def test_truncated_names_offset(self, tmp_path):
        p = init_params(SMALL, 2)
        path = save_checkpoint(p, AdamState.zeros_like(p), 1, tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:-20])
        with pytest.raises(EOFError, match="offset"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")


class TestTrain:
    def test_log_records_and_determinism(self, tmp_path, corpus):
        tc = TrainConfig(total_steps=6, batch_size=2, eval_every=3)
        train(SMALL, tc, corpus, log_path=tmp_path / "a.jsonl")
        train(SMALL, tc, corpus, log_path=tmp_path / "b.jsonl")
        a = (tmp_path / "a.jsonl").read_text()
        assert a == (tmp_path / "b.jsonl").read_text()
        recs = [json.loads(line) for line in a.splitlines()]
        assert [r["step"] for r in recs] == list(range(1, 7))
        assert {"step", "loss", "lr", "grad_norm", "lr_lowrank"} <= set(recs[0])
        assert "val_loss" in recs[2] and "val_loss" not in recs[0]
        assert recs[0]["lr_lowrank"] == pytest.approx(0.25 * recs[0]["lr"])

    def test_resume_matches_uninterrupted(self, tmp_path, corpus):
        tc = TrainConfig(total_steps=10, batch_size=2, eval_every=0, checkpoint_dir=str(tmp_path))
        whole = train(SMALL, TrainConfig(total_steps=10, batch_size=2, eval_every=0), corpus)
        train(SMALL, tc, corpus, stop_at=5)
        resumed = train(SMALL, tc, corpus, resume=load_checkpoint(tmp_path))
        np.testing.assert_array_equal(resumed.params.to_vector(), whole.params.to_vector())
        assert resumed.losses == whole.losses[5:]

    def test_resume_config_mismatch(self, tmp_path, corpus):
        p = init_params(SMALL)
        save_checkpoint(p, AdamState.zeros_like(p), 0, tmp_path)
        other = ModelConfig.uniform(3, 16, 24, 2, heads=2, seq_len=16)
        with pytest.raises(ValueError, match="differs"):
            train(other, TrainConfig(total_steps=2), corpus, resume=load_checkpoint(tmp_path))

    def test_recompute_matches_plain(self, corpus):
        tc = TrainConfig(total_steps=5, batch_size=2, eval_every=0)
        plain = train(SMALL, tc, corpus)
        rec = train(SMALL, TrainConfig(total_steps=5, batch_size=2, eval_every=0, recompute=True), corpus)
        np.testing.assert_allclose(rec.losses, plain.losses, rtol=1e-6)

    def test_recompute_needs_crnet(self, corpus):
        cfg = ModelConfig(n_layers=2, hidden=16, ffn_hidden=24, seq_len=16, arch="full_rank")
        with pytest.raises(ValueError):
            train(cfg, TrainConfig(total_steps=2, recompute=True), corpus)

    def test_nan_aborts_with_last_good_checkpoint(self, tmp_path, corpus, monkeypatch):
        from crnet import trainer as tr

        created = {}
        original = tr.init_params

        def capture(cfg, seed=None):
            created["params"] = original(cfg, seed)
            return created["params"]

        def poison(rec):
            if rec["step"] == 2:
                created["params"].tensors["lm_head"][...] = np.nan

        monkeypatch.setattr(tr, "init_params", capture)
        tc = TrainConfig(total_steps=5, batch_size=1, eval_every=0, checkpoint_dir=str(tmp_path))
        with pytest.raises(TrainingAborted) as info:
            train(SMALL, tc, corpus, on_step=poison)
        assert info.value.step == 2
        ck = load_checkpoint(tmp_path)
        assert ck.step == 1
        assert np.all(np.isfinite(ck.params.to_vector()))
