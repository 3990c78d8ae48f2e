import json
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from crnet.cost_model import (
    GIB, CostConfig, PipelineConfig, Quantity, activation_cost, comm_dimension, cost_report,
    format_table, optimizer_memory, param_count, pipeline_report, step_flops, total_step_flops,
)
from crnet.model import ModelConfig, init_params
from crnet.presets import PRESETS, get_preset, rank_schedule
from crnet.recompute import CheckpointPlan, selective_memory_elements


def _preset_cost(name, method="crnet", **kw):
    p = get_preset(name)
    base = dict(n_layers=p.n_layers, hidden=p.hidden, ffn_hidden=p.ffn_hidden, seq_len=p.seq_len,
                heads=p.heads, vocab=p.vocab, method=method)
    if method == "crnet":
        base["rank_schedule"] = p.ranks
    elif method != "full_rank":
        base["rank"] = p.ranks[0]
    base.update(kw)
    return CostConfig(**base)


shapes = st.tuples(st.integers(2, 6), st.integers(4, 32), st.integers(4, 40), st.integers(1, 3))


class TestParamCount:
    @given(shapes)
    def test_matches_instantiated_crnet(self, shape):
        L, h, hff, r = shape
        r = min(r, min(h, hff) - 1)
        cfg = ModelConfig.uniform(L, h, hff, r, vocab=11, seq_len=4)
        cc = CostConfig(n_layers=L, hidden=h, ffn_hidden=hff, rank=r, vocab=11, method="crnet")
        assert param_count(cc).total == init_params(cfg).size

    @given(shapes)
    def test_matches_instantiated_full_rank(self, shape):
        L, h, hff, _ = shape
        cfg = ModelConfig(n_layers=L, hidden=h, ffn_hidden=hff, vocab=11, seq_len=4, arch="full_rank")
        cc = CostConfig(n_layers=L, hidden=h, ffn_hidden=hff, vocab=11, method="full_rank")
        assert param_count(cc).total == init_params(cfg).size

    def test_60m_preset(self):
        q = param_count(_preset_cost("llama2-60m"))
        assert q.total == 43_113_521
        assert abs(float(q.total) / 43e6 - 1) <= 0.01

    def test_terms_sum_to_total(self):
        for m in ("full_rank", "lora", "sltrain", "galore", "cola", "crnet"):
            q = param_count(_preset_cost("llama2-130m", m))
            assert sum(v for _, v in q.terms) == q.total

    def test_optimizer_memory_is_four_copies(self):
        cfg = _preset_cost("llama2-60m")
        assert optimizer_memory(cfg).total == 4 * 2 * param_count(cfg).total
        assert float(optimizer_memory(cfg).total) / GIB == pytest.approx(0.3212, abs=1e-4)

    def test_invalid_rank(self):
        with pytest.raises(ValueError):
            CostConfig(n_layers=2, hidden=8, ffn_hidden=16, rank=8, method="cola")
        with pytest.raises(ValueError):
            CostConfig(n_layers=2, hidden=8, ffn_hidden=16, method="lora").ranks()

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            CostConfig(n_layers=2, hidden=8, ffn_hidden=16, method="adapter")


class TestFlops:
    @pytest.mark.parametrize("preset,method,expected", [
        ("llama2-350m", "full_rank", 4.838e11), ("llama2-350m", "lora", 8.128e11), ("llama2-7b", "full_rank", 1.005e13),
    ])
    def test_fixtures(self, preset, method, expected):
        assert float(step_flops(_preset_cost(preset, method)).total) == pytest.approx(expected, rel=5e-3)

    @given(st.integers(1, 400))
    def test_crnet_below_full_rank_at_small_rank(self, r):
        base = dict(n_layers=8, hidden=1024, ffn_hidden=2736, seq_len=256)
        full = step_flops(CostConfig(method="full_rank", **base)).total
        cr = step_flops(CostConfig(method="crnet", rank=r, **base)).total
        assert cr < full

    @given(st.integers(1, 300), st.integers(1, 300))
    def test_monotone_in_rank(self, r1, r2):
        base = dict(n_layers=4, hidden=512, ffn_hidden=1376, method="crnet")
        lo, hi = sorted((r1, r2))
        assert step_flops(CostConfig(rank=lo, **base)).total <= step_flops(CostConfig(rank=hi, **base)).total

    def test_fractional_ffn_exact(self):
        cfg = CostConfig(n_layers=32, hidden=4096, ffn_hidden=Fraction(8 * 4096, 3), method="full_rank")
        assert isinstance(step_flops(cfg).total, Fraction)


class TestActivations:
    def test_crnet_memory_matches_cache_formula(self):
        mcfg = ModelConfig.uniform(9, 8, 16, 2, vocab=16, seq_len=5)
        cc = CostConfig(n_layers=9, hidden=8, ffn_hidden=16, seq_len=5, rank=2, checkpoint_count=2,
                        gcp_mode="crnet_recompute")
        mem, _ = activation_cost(cc)
        assert mem.total == selective_memory_elements(mcfg, CheckpointPlan(9, (5, 9)))

    def test_crnet_recompute_needs_checkpoint(self):
        cc = CostConfig(n_layers=4, hidden=8, ffn_hidden=16, rank=2, gcp_mode="crnet_recompute")
        with pytest.raises(ValueError):
            activation_cost(cc)

    def test_table3_ordering(self):
        base = dict(n_layers=32, hidden=4096, ffn_hidden=Fraction(8 * 4096, 3), seq_len=256, batch=16)
        full = CostConfig(method="full_rank", **base)
        vanilla = total_step_flops(full, "vanilla")
        assert total_step_flops(full, "none") < vanilla
        cr = total_step_flops(CostConfig(method="crnet", rank=512, checkpoint_count=4, **base), "crnet_recompute")
        assert cr < total_step_flops(full, "none")


class TestReports:
    def test_report_json_and_table(self):
        rep = cost_report(_preset_cost("llama2-60m"))
        data = json.loads(rep.to_json())
        assert data["param_count"]["total"] == 43_113_521
        assert "llama" not in format_table([rep])
        assert len(format_table([rep, rep]).splitlines()) == 4

    def test_quantity_scaled(self):
        q = Quantity.of(("a", 2), ("b", 3)).scaled(2, "x2")
        assert q.total == 10


class TestPipeline:
    def test_13b_full_rank(self):
        r = pipeline_report(PipelineConfig(), _preset_cost("llama2-13b", "full_rank"))
        assert r["compute_flops"] == pytest.approx(7.48e15, rel=0.01)
        assert r["compute_time_s"] == pytest.approx(23.97, rel=0.01)
        assert r["comm_volume_gib"] == pytest.approx(1.875)
        assert r["comm_time_s"] == pytest.approx(0.029, rel=0.05)

    def test_crnet_sends_more(self):
        cfg = _preset_cost("llama2-13b", checkpoint_count=5)
        assert comm_dimension(cfg) > comm_dimension(_preset_cost("llama2-13b", "full_rank"))

    @given(st.integers(1, 16))
    def test_volume_linear_in_boundaries(self, pp):
        cfg = _preset_cost("llama2-13b", "full_rank")
        one = pipeline_report(PipelineConfig(pp_size=2), cfg)["comm_volume_gib"]
        assert pipeline_report(PipelineConfig(pp_size=pp), cfg)["comm_volume_gib"] == pytest.approx(one * (pp - 1))

    def test_other_methods_rejected(self):
        with pytest.raises(ValueError):
            pipeline_report(PipelineConfig(), _preset_cost("llama2-13b", "lora"))

    def test_bad_pipeline(self):
        with pytest.raises(ValueError):
            PipelineConfig(microbatch=0)


class TestPresets:
    def test_all_presets_build(self):
        for p in PRESETS.values():
            assert len(p.ranks) == p.n_layers - 1
            p.model_config()

    def test_rank_schedule_gap(self):
        with pytest.raises(ValueError, match="unassigned"):
            rank_schedule(4, [(2, 3, 8)])

    def test_unknown(self):
        with pytest.raises(ValueError):
            get_preset("gpt")
