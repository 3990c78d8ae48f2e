import numpy as np
import pytest
from hypothesis import given, strategies as st

from crnet.backprop import backward, loss_and_grad, random_test_params
from crnet.model import POSITIONS, ModelConfig, forward, tau
from crnet.recompute import (
    CheckpointPlan, backward_recompute, profile_csv, reconstruct_prev, reconstruction_error_profile,
    select_checkpoints, selective_memory_elements,
)
from crnet._validation import ShapeError


def _grads_both_ways(cfg, plan, seed=0, beta_min=0.1):
    p = random_test_params(cfg, seed, beta_min=beta_min)
    rng = np.random.default_rng([seed, 3])
    tokens = rng.integers(0, cfg.vocab, cfg.seq_len)
    targets = rng.integers(0, cfg.vocab, cfg.seq_len)
    logits, full = forward(p, tokens)
    _, d = loss_and_grad(logits, targets)
    _, sel = forward(p, tokens, "selective", plan)
    return backward(p, full, d), backward_recompute(p, sel, d), full, sel


class TestPlan:
    @pytest.mark.parametrize("L,k,expected", [
        (8, 1, (8,)), (32, 4, (9, 16, 24, 32)), (9, 8, tuple(range(2, 10))), (17, 2, (9, 17)),
    ])
    def test_examples(self, L, k, expected):
        assert select_checkpoints(L, k).layers == expected

    @given(st.integers(2, 200).flatmap(lambda L: st.tuples(st.just(L), st.integers(1, L - 1))))
    def test_invariants(self, Lk):
        L, k = Lk
        plan = select_checkpoints(L, k)
        assert len(plan) == k
        assert L in plan and 1 not in plan
        assert all(2 <= l <= L for l in plan.layers)
        assert select_checkpoints(L, k) == plan

    @pytest.mark.parametrize("k", [0, 8])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            select_checkpoints(8, k)

    def test_plan_rejects_layer_one_and_missing_last(self):
        with pytest.raises(ValueError):
            CheckpointPlan(4, (1, 4))
        with pytest.raises(ValueError):
            CheckpointPlan(4, (2, 3))


class TestReconstruct:
    def test_zero_b(self, rng):
        y = rng.normal(size=(4, 3))
        out = reconstruct_prev(y, rng.normal(size=(4, 2)), np.zeros((2, 3)), -0.5, 1e-6)
        np.testing.assert_allclose(out, y / tau(-0.5, 1e-6))

    @given(st.floats(-2, 2, allow_nan=False), st.integers(0, 1000))
    def test_inverts_forward_relation(self, beta, seed):
        rng = np.random.default_rng(seed)
        prev, xa, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 2)), rng.normal(size=(2, 4))
        t = tau(beta, 1e-6)
        nxt = t * prev + xa @ b
        rec = reconstruct_prev(nxt, xa, b, beta, 1e-6)
        scale = (np.abs(nxt).max() + np.abs(xa @ b).max()) / abs(t)
        np.testing.assert_allclose(rec, prev, atol=1e-12 * scale)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            reconstruct_prev(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(3, 3)), 1.0, 1e-6)


class TestBackwardRecompute:
    def test_all_layers_stored_is_bitwise_equal(self):
        cfg = ModelConfig.uniform(4, 8, 16, 2, vocab=16, seq_len=5)
        g_full, g_sel, *_ = _grads_both_ways(cfg, select_checkpoints(4, 3))
        np.testing.assert_array_equal(g_full.to_vector(), g_sel.to_vector())

    @given(st.integers(0, 30), st.integers(1, 5))
    def test_matches_full_cache(self, seed, k):
        cfg = ModelConfig.uniform(6, 8, 16, 2, heads=2, vocab=16, seq_len=5)
        g_full, g_sel, *_ = _grads_both_ways(cfg, select_checkpoints(6, k), seed)
        a, b = g_full.to_vector(), g_sel.to_vector()
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
        assert rel.max() <= 1e-8

    def test_requires_selective_cache(self):
        cfg = ModelConfig.uniform(3, 8, 16, 2, vocab=16, seq_len=5)
        p = random_test_params(cfg, 0)
        logits, full = forward(p, np.arange(5))
        with pytest.raises(ValueError, match="selective"):
            backward_recompute(p, full, np.zeros_like(logits))

    def test_missing_low_rank_output_detected(self):
        cfg = ModelConfig.uniform(3, 8, 16, 2, vocab=16, seq_len=5)
        p = random_test_params(cfg, 0)
        logits, sel = forward(p, np.arange(5), "selective", [3])
        del sel.low_rank_out[3]
        with pytest.raises(ValueError, match="low-rank"):
            backward_recompute(p, sel, np.zeros_like(logits))

    def test_memory_formula_matches_cache(self):
        cfg = ModelConfig.uniform(9, 8, 16, 2, vocab=16, seq_len=5)
        plan = CheckpointPlan(9, (5, 9))
        *_, sel = _grads_both_ways(cfg, plan)
        L, b, s, h, hff = 9, 2, 5, 8, 16
        expected = (L + 5 * b) * s * h + 2 * b * s * hff + 7 * s * sum(cfg.ranks)
        assert selective_memory_elements(cfg, plan) == expected == sel.stored_elements()

    def test_selective_smaller_than_full(self):
        cfg = ModelConfig.uniform(9, 8, 16, 2, vocab=16, seq_len=5)
        *_, full, sel = _grads_both_ways(cfg, CheckpointPlan(9, (9,)))
        assert sel.stored_elements() < full.stored_elements()


class TestProfile:
    def test_profile_rows_and_csv(self):
        cfg = ModelConfig.uniform(5, 8, 16, 2, vocab=16, seq_len=5)
        p = random_test_params(cfg, 1, beta_min=0.1)
        rows = reconstruction_error_profile(p, np.arange(5), CheckpointPlan(5, (5,)))
        assert len(rows) == 5 * len(POSITIONS)
        assert max(r["rel_error"] for r in rows) <= 1e-9
        text = profile_csv(rows)
        assert text.splitlines()[0] == "layer,position,rel_error"
        assert len(text.splitlines()) == len(rows) + 1

    def test_small_beta_amplifies_error(self):
        """Division by tau amplifies rounding; tiny |beta| must show larger error than |beta| near 1."""
        cfg = ModelConfig.uniform(6, 8, 16, 2, vocab=16, seq_len=5)
        p = random_test_params(cfg, 2, beta_min=0.9)
        plan = CheckpointPlan(6, (6,))
        base = max(r["rel_error"] for r in reconstruction_error_profile(p, np.arange(5), plan))
        for l in range(2, 7):
            for pos in POSITIONS:
                p.set_beta(l, pos, 1e-4)
        small = max(r["rel_error"] for r in reconstruction_error_profile(p, np.arange(5), plan))
        assert small > base
