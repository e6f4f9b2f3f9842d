import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthorank import (
    ConfigError,
    LayerPlan,
    ModelConfig,
    calibrate_greedy,
    corpus_sha256,
    effective_sparsity,
    eligible_layers,
    flop_count,
    perplexity,
    plan_from_sparsity,
)
from orthorank.calibration import plan_effective_sparsity

import helpers


class TestEffectiveSparsity:
    def test_thirty_pct_layers_one_third_tokens(self):
        assert effective_sparsity(0.30, 0.333) == pytest.approx(0.2001, abs=1e-12)

    def test_fifteen_pct_layers(self):
        assert effective_sparsity(0.15, 0.333) == pytest.approx(0.10005, abs=1e-12)

    def test_full_keep_ratio_removes_nothing(self):
        assert effective_sparsity(0.7, 1.0) == 0.0

    def test_domain(self):
        with pytest.raises(ConfigError):
            effective_sparsity(-0.1, 0.5)
        with pytest.raises(ConfigError):
            effective_sparsity(0.5, 1.5)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_monotone(self, f, r, delta):
        base = effective_sparsity(f, r)
        assert effective_sparsity(min(1.0, f + delta), r) >= base
        assert effective_sparsity(f, min(1.0, r + delta)) <= base


class TestPlanFromSparsity:
    def test_forty_layer_twenty_pct(self):
        m, eligible = plan_from_sparsity(40, 1, 0.20, 0.333)
        assert m == 12
        assert eligible == list(range(2, 39))

    def test_forty_layer_ten_pct(self):
        m, _ = plan_from_sparsity(40, 1, 0.10, 0.333)
        assert m == 6

    def test_zero_sparsity(self):
        m, eligible = plan_from_sparsity(40, 3, 0.0, 0.333)
        assert m == 0
        assert eligible == list(range(4, 39))

    def test_rounds_half_up(self):
        # 0.125 * 10 / 0.5 = 2.5 -> 3
        m, _ = plan_from_sparsity(10, 0, 0.125, 0.5)
        assert m == 3

    def test_infeasible_names_maximum(self):
        with pytest.raises(ConfigError, match="maximum achievable"):
            plan_from_sparsity(10, 5, 0.5, 0.333)

    def test_keep_ratio_one_unreachable(self):
        with pytest.raises(ConfigError, match="maximum achievable"):
            plan_from_sparsity(10, 1, 0.2, 1.0)

    def test_domain(self):
        with pytest.raises(ConfigError):
            plan_from_sparsity(10, 1, 1.0, 0.333)
        with pytest.raises(ConfigError):
            plan_from_sparsity(10, 1, 0.2, 0.0)


def test_eligible_layers_excludes_sink_and_final():
    assert eligible_layers(10, 1) == list(range(2, 9))
    assert eligible_layers(4, 2) == []
    assert eligible_layers(6, 0) == [1, 2, 3, 4]


class TestLayerPlan:
    def plan(self, **kw):
        base = dict(layers=[2, 4, 5], keep_ratio=0.333, model_id="m",
                    l_sink=1, target_sparsity=0.2)
        base.update(kw)
        return LayerPlan(**base)

    def test_entries_and_ratio_for(self):
        plan = self.plan()
        assert plan.entries() == [(2, 0.333), (4, 0.333), (5, 0.333)]
        assert plan.ratio_for(4) == 0.333
        assert plan.ratio_for(3) is None

    def test_per_layer_ratios(self):
        plan = self.plan(keep_ratio=[0.25, 0.5, 0.75])
        assert plan.entries() == [(2, 0.25), (4, 0.5), (5, 0.75)]

    def test_layers_must_ascend_unique(self):
        with pytest.raises(ConfigError):
            self.plan(layers=[4, 2, 5])
        with pytest.raises(ConfigError):
            self.plan(layers=[2, 2, 5])

    def test_layers_must_follow_sink(self):
        with pytest.raises(ConfigError):
            self.plan(layers=[1, 2], l_sink=1)

    def test_ratio_domain(self):
        with pytest.raises(ConfigError):
            self.plan(keep_ratio=0.0)
        with pytest.raises(ConfigError):
            self.plan(keep_ratio=1.5)
        with pytest.raises(ConfigError):
            self.plan(keep_ratio=[0.5, 0.5])  # length mismatch

    def test_json_schema_keys(self):
        data = json.loads(self.plan().to_json())
        assert set(data) == {"model_id", "l_sink", "target_sparsity",
                             "keep_ratio", "layers", "calib"}
        assert data["layers"] == [2, 4, 5]

    def test_json_round_trip(self):
        plan = self.plan(calib={"corpus_sha256": "ab", "context_len": 64})
        again = LayerPlan.from_json(plan.to_json())
        assert again == plan

    def test_save_load_file(self, tmp_path):
        plan = self.plan()
        plan.save(tmp_path / "plan.json")
        assert LayerPlan.load(tmp_path / "plan.json") == plan

    def test_effective_sparsity_of_plan(self):
        plan = self.plan()
        got = plan_effective_sparsity(plan, 10)
        assert got == pytest.approx(0.3 * (1 - 0.333), abs=1e-12)


def test_corpus_sha256_deterministic():
    a = corpus_sha256(np.array([1, 2, 3]))
    assert a == corpus_sha256([1, 2, 3])
    assert a != corpus_sha256([1, 2, 4])
    assert len(a) == 64


@pytest.fixture(scope="module")
def corpus():
    return helpers.rotation_corpus(256)


class TestCalibrateGreedy:
    W = 128

    def test_identity_layer_chosen_first(self, rotation_model, corpus):
        plan = calibrate_greedy(rotation_model, corpus, 1, 0.333,
                                eligible=range(2, 10), context_len=self.W, l_sink=1)
        assert plan.layers == [6]

    def test_round_one_equals_exhaustive(self, rotation_model, corpus):
        eligible = list(range(2, 10))
        singles = {
            layer: perplexity(
                rotation_model,
                LayerPlan(layers=[layer], keep_ratio=0.333,
                          model_id=rotation_model.model_id, l_sink=1),
                corpus, self.W).perplexity
            for layer in eligible
        }
        best = min(eligible, key=lambda l: (singles[l], l))
        plan = calibrate_greedy(rotation_model, corpus, 1, 0.333,
                                eligible=eligible, context_len=self.W, l_sink=1)
        assert plan.layers == [best]

    def test_identity_conversion_is_free(self, rotation_model, corpus):
        dense = perplexity(rotation_model, None, corpus, self.W).perplexity
        converted = perplexity(
            rotation_model,
            LayerPlan(layers=[6], keep_ratio=0.333,
                      model_id=rotation_model.model_id, l_sink=1),
            corpus, self.W).perplexity
        assert converted == dense
        # converting any live layer strictly hurts on this model
        for layer in (2, 5, 9):
            hurt = perplexity(
                rotation_model,
                LayerPlan(layers=[layer], keep_ratio=0.333,
                          model_id=rotation_model.model_id, l_sink=1),
                corpus, self.W).perplexity
            assert hurt > dense

    def test_two_identity_layers_found_in_order(self, corpus):
        model = helpers.make_rotation_model(11, {4, 7})
        plan = calibrate_greedy(model, corpus, 2, 0.333,
                                eligible=range(2, 10), context_len=self.W, l_sink=1)
        assert plan.layers == [4, 7]

    def test_exact_ties_break_to_smaller_layer(self, corpus):
        # both identity layers give exactly the dense perplexity; round one
        # must take the smaller index
        model = helpers.make_rotation_model(11, {4, 7})
        plan = calibrate_greedy(model, corpus, 1, 0.333,
                                eligible=range(2, 10), context_len=self.W, l_sink=1)
        assert plan.layers == [4]

    def test_zero_rounds(self, rotation_model, corpus):
        plan = calibrate_greedy(rotation_model, corpus, 0, 0.333,
                                eligible=range(2, 10), context_len=self.W, l_sink=1)
        assert plan.layers == []

    def test_m_exceeds_eligible(self, rotation_model, corpus):
        with pytest.raises(ConfigError):
            calibrate_greedy(rotation_model, corpus, 9, 0.333,
                             eligible=range(2, 10), context_len=self.W)

    def test_threaded_matches_serial(self, rotation_model, corpus):
        serial = calibrate_greedy(rotation_model, corpus, 2, 0.333,
                                  eligible=range(2, 10), context_len=self.W,
                                  l_sink=1)
        threaded = calibrate_greedy(rotation_model, corpus, 2, 0.333,
                                    eligible=range(2, 10), context_len=self.W,
                                    l_sink=1, threads=4)
        assert serial == threaded

    def test_one_shot_takes_m_best_singles(self, corpus):
        model = helpers.make_rotation_model(11, {4, 7})
        plan = calibrate_greedy(model, corpus, 2, 0.333,
                                eligible=range(2, 10), context_len=self.W,
                                l_sink=1, one_shot=True)
        assert plan.layers == [4, 7]

    def test_plan_metadata(self, rotation_model, corpus):
        plan = calibrate_greedy(rotation_model, corpus, 1, 0.333,
                                eligible=range(2, 10), context_len=self.W,
                                l_sink=1, target_sparsity=0.06)
        assert plan.calib == {"corpus_sha256": corpus_sha256(corpus),
                              "context_len": self.W}
        assert plan.model_id == rotation_model.model_id
        assert plan.target_sparsity == 0.06


def ref_layer_flops(cfg, t, k, selective):
    """Independent recount of the documented per-layer cost model."""
    d, dffn, dh, h, kv = cfg.d_model, cfg.d_ffn, cfg.d_head, cfg.n_heads, cfg.n_kv_heads
    rows = k if selective else t
    flops = 2 * t * d * (kv * dh) * 2          # K and V projections, all tokens
    flops += 2 * rows * d * (h * dh)           # Q projection
    flops += 2 * h * rows * t * dh * 2         # scores and context matmuls
    flops += 2 * rows * (h * dh) * d           # output projection
    flops += 6 * rows * d * dffn               # gate, up, down
    flops += 4 * t * d + 4 * rows * d          # two RMSNorms
    if selective:
        flops += 2 * t * d                     # scoring dot products
    return flops


class TestFlopCount:
    CFG = ModelConfig(n_layers=40, d_model=64, n_heads=4, n_kv_heads=1,
                      d_head=16, d_ffn=1024, vocab_size=64)

    def plan(self, layers, r=0.333):
        return LayerPlan(layers=layers, keep_ratio=r, model_id="m", l_sink=1)

    def test_empty_plan_ratio_one(self):
        out = flop_count(self.CFG, self.plan([]), 128)
        assert out["ratio"] == 1.0
        assert out["plan_flops"] == out["dense_flops"]

    def test_full_keep_ratio_near_one(self):
        layers = list(range(2, 39))
        out = flop_count(self.CFG, self.plan(layers, r=1.0), 128)
        assert abs(out["ratio"] - 1.0) < 0.01

    def test_per_layer_matches_recount(self):
        t = 129  # divisible by 3 so k is exactly t/3
        out = flop_count(self.CFG, self.plan([5]), t)
        k = int(math.floor(0.333 * t))
        assert out["per_layer_dense"][5] == ref_layer_flops(self.CFG, t, t, False)
        assert out["per_layer_plan"][5] == ref_layer_flops(self.CFG, t, k, True)
        assert out["per_layer_plan"][4] == out["per_layer_dense"][4]

    def test_ffn_share_is_one_third(self):
        # with k = t/3 exactly, the converted layer's FFN cost is one third
        t = 120
        plan = self.plan([5], r=1.0 / 3.0)
        k = int(math.floor(t / 3.0))
        assert k * 3 == t
        ffn_dense = 6 * t * self.CFG.d_model * self.CFG.d_ffn
        ffn_plan = 6 * k * self.CFG.d_model * self.CFG.d_ffn
        assert ffn_plan * 3 == ffn_dense
        out = flop_count(self.CFG, plan, t)
        delta = out["per_layer_dense"][5] - out["per_layer_plan"][5]
        expected = (ref_layer_flops(self.CFG, t, t, False)
                    - ref_layer_flops(self.CFG, t, k, True))
        assert delta == expected

    def test_target_config_ratio_near_point_eight(self):
        # 12 of 40 layers at keep 0.333 removes about 20% of compute on an
        # FFN-dominated shape; scoring overhead keeps it within 3%
        plan = self.plan(list(range(2, 14)))
        out = flop_count(self.CFG, plan, 128)
        assert abs(out["ratio"] - 0.80) < 0.03

    def test_ratio_tracks_effective_sparsity(self):
        for m_layers in (4, 8, 12, 16):
            plan = self.plan(list(range(2, 2 + m_layers)))
            out = flop_count(self.CFG, plan, 128)
            expect = 1.0 - plan_effective_sparsity(plan, self.CFG.n_layers)
            assert abs(out["ratio"] - expect) < 0.03

    def test_bad_seq_len(self):
        with pytest.raises(ConfigError):
            flop_count(self.CFG, self.plan([]), 0)

    def test_out_of_range_layers_rejected(self):
        # same contract as the forward pass: silent clipping would report
        # a ratio for a plan the model cannot run
        with pytest.raises(ConfigError, match="out of range"):
            flop_count(self.CFG, self.plan([2, 40]), 128)
