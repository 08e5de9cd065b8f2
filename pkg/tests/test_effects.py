"""Tests for the fusion / effect-decomposition algebra.

Expected values are computed in-test from straight stdlib-math formulas,
independent of the library's stable log-sigmoid path.
"""

import itertools
import math

import numpy as np
import pytest

from cf_effects.effects import (
    SCORE_FLOOR,
    CfMode,
    CounterfactualConfig,
    Fusion,
    GraphMode,
    InferenceMode,
    decompose,
    fuse,
    fuse_input_grads,
    inference_score,
    log_sigmoid,
    rubi_improved_tie,
    select_answer,
    star_value,
)


def ref_sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def ref_hm(*logits: float) -> float:
    p = math.prod(ref_sigmoid(z) for z in logits)
    return math.log(p / (1.0 + p))


def ref_sum(*logits: float) -> float:
    return math.log(ref_sigmoid(sum(logits)))


UNIFORM0 = CounterfactualConfig.uniform(0.0)


class TestFuse:
    def test_sum_full_zero_logits(self):
        out = fuse(Fusion.SUM, GraphMode.FULL, [0.0], [0.0], [0.0])
        np.testing.assert_allclose(out, math.log(0.5), atol=1e-12)

    def test_hm_full_zero_logits(self):
        out = fuse(Fusion.HM, GraphMode.FULL, [0.0], [0.0], [0.0])
        np.testing.assert_allclose(out, math.log(1.0 / 9.0), atol=1e-12)

    def test_sum_full_123(self):
        out = fuse(Fusion.SUM, GraphMode.FULL, [1.0], [2.0], [3.0])
        np.testing.assert_allclose(out, ref_sum(1, 2, 3), atol=1e-12)
        np.testing.assert_allclose(out, -0.002475685, atol=1e-6)

    def test_hm_full_123(self):
        out = fuse(Fusion.HM, GraphMode.FULL, [1.0], [2.0], [3.0])
        np.testing.assert_allclose(out, ref_hm(1, 2, 3), atol=1e-12)
        np.testing.assert_allclose(out, -0.967106, atol=1e-5)

    def test_rubi_simplified(self):
        out = fuse(Fusion.RUBI, GraphMode.SIMPLIFIED, [1.0], None, [3.0])
        np.testing.assert_allclose(out, 3.0 * ref_sigmoid(1.0), atol=1e-12)
        np.testing.assert_allclose(out, 2.193176, atol=1e-5)

    def test_lm_simplified(self):
        out = fuse(Fusion.LM, GraphMode.SIMPLIFIED, [1.0], None, [3.0], g=1.0)
        expect = math.log(ref_sigmoid(3.0)) + math.log(ref_sigmoid(1.0))
        np.testing.assert_allclose(out, expect, atol=1e-12)
        np.testing.assert_allclose(out, -0.361849, atol=1e-5)

    def test_simplified_ignores_v(self):
        out = fuse(Fusion.SUM, GraphMode.SIMPLIFIED, [1.0], None, [3.0])
        np.testing.assert_allclose(out, ref_sum(1, 3), atol=1e-12)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(7)
        zq, zv, zk = rng.uniform(-5, 5, (3, 8, 6))
        batch = fuse(Fusion.HM, GraphMode.FULL, zq, zv, zk)
        for i in range(8):
            row = fuse(Fusion.HM, GraphMode.FULL, zq[i], zv[i], zk[i])
            np.testing.assert_array_equal(batch[i], row)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            fuse(Fusion.SUM, GraphMode.FULL, [0.0, 0.0], [0.0], [0.0])

    def test_rubi_lm_require_simplified(self):
        with pytest.raises(ValueError, match="SIMPLIFIED"):
            fuse(Fusion.RUBI, GraphMode.FULL, [0.0], [0.0], [0.0])
        with pytest.raises(ValueError, match="SIMPLIFIED"):
            fuse(Fusion.LM, GraphMode.FULL, [0.0], [0.0], [0.0], g=1.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            fuse(Fusion.SUM, GraphMode.FULL, [np.nan], [0.0], [0.0])
        with pytest.raises(ValueError, match="finite"):
            fuse(Fusion.SUM, GraphMode.FULL, [0.0], [np.inf], [0.0])

    def test_full_requires_v(self):
        with pytest.raises(ValueError, match="requires z_v"):
            fuse(Fusion.SUM, GraphMode.FULL, [0.0], None, [0.0])

    def test_lm_rejects_negative_g(self):
        with pytest.raises(ValueError, match="non-negative"):
            fuse(Fusion.LM, GraphMode.SIMPLIFIED, [0.0], None, [0.0], g=-0.5)


class TestStarValue:
    def test_uniform_broadcast(self):
        np.testing.assert_array_equal(
            star_value(CounterfactualConfig.uniform(0.0), 3), [0.0, 0.0, 0.0]
        )

    def test_prior_is_log_prior(self):
        cfg = CounterfactualConfig.from_prior([0.5, 0.25, 0.25])
        np.testing.assert_allclose(
            star_value(cfg), [math.log(0.5), math.log(0.25), math.log(0.25)], atol=1e-15
        )

    def test_random_passthrough(self):
        cfg = CounterfactualConfig(CfMode.RANDOM, np.array([0.3, -1.2, 2.0]))
        np.testing.assert_array_equal(star_value(cfg), [0.3, -1.2, 2.0])

    def test_prior_validation(self):
        with pytest.raises(ValueError, match="positive"):
            CounterfactualConfig.from_prior([1.0, 0.0])
        with pytest.raises(ValueError, match="sum to 1"):
            CounterfactualConfig.from_prior([0.5, 0.4])

    def test_uniform_needs_length(self):
        with pytest.raises(ValueError, match="num_answers"):
            star_value(CounterfactualConfig.uniform(1.0))


class TestDecompose:
    def test_sum_full_example(self):
        d = decompose(Fusion.SUM, GraphMode.FULL, [1.0], [2.0], [3.0], UNIFORM0)
        h_fact, h_sss = ref_sum(1, 2, 3), ref_sum(0, 0, 0)
        h_qss, h_svk = ref_sum(1, 0, 0), ref_sum(0, 2, 3)
        np.testing.assert_allclose(d.te, h_fact - h_sss, atol=1e-12)
        np.testing.assert_allclose(d.nde, h_qss - h_sss, atol=1e-12)
        np.testing.assert_allclose(d.tie, h_fact - h_qss, atol=1e-12)
        np.testing.assert_allclose(d.tde, h_fact - h_svk, atol=1e-12)
        np.testing.assert_allclose(d.nie, h_svk - h_sss, atol=1e-12)
        np.testing.assert_allclose(d.te, 0.690671, atol=1e-6)
        np.testing.assert_allclose(d.nde, 0.379885, atol=1e-6)
        np.testing.assert_allclose(d.tie, 0.310786, atol=1e-6)
        np.testing.assert_allclose(d.tde, 0.004240, atol=1e-6)
        np.testing.assert_allclose(d.nie, 0.686432, atol=1e-6)
        np.testing.assert_allclose(d.te - d.nde - d.tie, 0.0, atol=1e-15)
        np.testing.assert_allclose(d.te - d.tde - d.nie, 0.0, atol=1e-15)

    def test_factual_equal_to_star_gives_zero_effects(self):
        cfg = CounterfactualConfig.uniform(0.7)
        z = np.full(4, 0.7)
        for strategy, mode in [
            (Fusion.SUM, GraphMode.FULL),
            (Fusion.HM, GraphMode.FULL),
            (Fusion.RUBI, GraphMode.SIMPLIFIED),
            (Fusion.LM, GraphMode.SIMPLIFIED),
        ]:
            g = 1.3 if strategy is Fusion.LM else None
            d = decompose(strategy, mode, z, z, z, cfg, g=g)
            for eff in (d.te, d.nde, d.tie, d.tde, d.nie):
                np.testing.assert_allclose(eff, 0.0, atol=1e-12)

    def test_nde_example(self):
        d = decompose(Fusion.SUM, GraphMode.FULL, [2.0], [0.0], [0.0], UNIFORM0)
        expect = math.log(ref_sigmoid(2.0)) - math.log(ref_sigmoid(0.0))
        np.testing.assert_allclose(d.nde, expect, atol=1e-12)
        np.testing.assert_allclose(d.nde, 0.566219, atol=1e-6)


def _strategy_grid():
    for strategy in Fusion:
        modes = (
            (GraphMode.FULL, GraphMode.SIMPLIFIED)
            if strategy in (Fusion.HM, Fusion.SUM)
            else (GraphMode.SIMPLIFIED,)
        )
        for mode in modes:
            yield strategy, mode


class TestDecompositionIdentities:
    def test_identities_hold_for_random_tuples(self):
        rng = np.random.default_rng(11)
        for strategy, mode in _strategy_grid():
            zq, zv, zk = rng.uniform(-10, 10, (3, 250, 9))
            g = rng.uniform(0, 3, 250) if strategy is Fusion.LM else None
            cfg = CounterfactualConfig.uniform(rng.uniform(-5, 5))
            d = decompose(strategy, mode, zq, zv, zk, cfg, g=g)
            np.testing.assert_allclose(d.te, d.nde + d.tie, atol=1e-9)
            np.testing.assert_allclose(d.te, d.tde + d.nie, atol=1e-9)

    def test_identities_hold_for_vector_configs(self):
        rng = np.random.default_rng(12)
        zq, zv, zk = rng.uniform(-10, 10, (3, 100, 6))
        for cfg in (
            CounterfactualConfig.from_prior([0.4, 0.2, 0.1, 0.1, 0.1, 0.1]),
            CounterfactualConfig(CfMode.RANDOM, rng.standard_normal(6)),
        ):
            for strategy, mode in _strategy_grid():
                g = rng.uniform(0, 3, 100) if strategy is Fusion.LM else None
                d = decompose(strategy, mode, zq, zv, zk, cfg, g=g)
                np.testing.assert_allclose(d.te, d.nde + d.tie, atol=1e-9)
                np.testing.assert_allclose(d.te, d.tde + d.nie, atol=1e-9)


class TestRubiLmReductions:
    def test_rubi_nie_closed_form(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            zq, zk = rng.uniform(-10, 10, (2, 7))
            c = rng.uniform(-5, 5)
            d = decompose(Fusion.RUBI, GraphMode.SIMPLIFIED, zq, None, zk,
                          CounterfactualConfig.uniform(c))
            closed = ref_sigmoid(c) * (zk - c)
            np.testing.assert_allclose(d.nie, closed, atol=1e-9)
            assert np.array_equal(np.argsort(d.nie), np.argsort(zk))

    def test_lm_nie_ranking(self):
        rng = np.random.default_rng(22)
        for _ in range(200):
            zq, zk = rng.uniform(-10, 10, (2, 7))
            c, g = rng.uniform(-5, 5), rng.uniform(0, 3)
            d = decompose(Fusion.LM, GraphMode.SIMPLIFIED, zq, None, zk,
                          CounterfactualConfig.uniform(c), g=g)
            assert np.array_equal(np.argsort(d.nie), np.argsort(zk))
            np.testing.assert_allclose(
                d.nie, log_sigmoid(zk) - math.log(ref_sigmoid(c)), atol=1e-9
            )


class TestRubiImprovedTie:
    def test_sigma_zero_scaling(self):
        out = rubi_improved_tie(np.zeros(3), np.array([1.0, 3.0, 2.0]), 0.5)
        np.testing.assert_allclose(out, [0.25, 1.25, 0.75], atol=1e-12)

    def test_zk_equal_c_gives_zero(self):
        out = rubi_improved_tie(np.array([0.3, -2.0]), np.array([1.5, 1.5]), 1.5)
        np.testing.assert_allclose(out, 0.0, atol=1e-15)

    def test_c_zero_equals_rubi_fuse(self):
        out = rubi_improved_tie(np.array([1.0]), np.array([3.0]), 0.0)
        np.testing.assert_allclose(out, 3.0 * ref_sigmoid(1.0), atol=1e-12)

    def test_matches_decompose_tie(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            zq, zk = rng.uniform(-10, 10, (2, 8))
            c = rng.uniform(-5, 5)
            d = decompose(Fusion.RUBI, GraphMode.SIMPLIFIED, zq, None, zk,
                          CounterfactualConfig.uniform(c))
            np.testing.assert_allclose(
                rubi_improved_tie(zq, zk, c), d.tie, atol=1e-12
            )

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            rubi_improved_tie(np.zeros(3), np.zeros(2), 0.0)


class TestInferenceScore:
    def test_branch_k_passthrough(self):
        zk = np.array([1.0, 3.0, 2.0])
        out = inference_score(InferenceMode.BRANCH_K, Fusion.SUM, GraphMode.FULL,
                              np.zeros(3), np.zeros(3), zk)
        np.testing.assert_array_equal(out, zk)
        assert select_answer(out) == 1

    def test_tie_matches_decompose(self):
        zq, zv, zk = np.array([1.0]), np.array([2.0]), np.array([3.0])
        out = inference_score(InferenceMode.TIE, Fusion.SUM, GraphMode.FULL,
                              zq, zv, zk, UNIFORM0)
        np.testing.assert_allclose(out, ref_sum(1, 2, 3) - ref_sum(1, 0, 0), atol=1e-12)

    def test_nie_rubi_ranks_like_zk(self):
        rng = np.random.default_rng(31)
        zq = rng.uniform(-5, 5, 3)
        zk = np.array([1.0, 3.0, 2.0])
        for c in (-2.0, 0.0, 1.7):
            out = inference_score(InferenceMode.NIE, Fusion.RUBI, GraphMode.SIMPLIFIED,
                                  zq, None, zk, CounterfactualConfig.uniform(c))
            assert np.array_equal(np.argsort(out), np.argsort(zk))

    def test_posterior_is_fused(self):
        out = inference_score(InferenceMode.POSTERIOR, Fusion.HM, GraphMode.FULL,
                              np.zeros(2), np.zeros(2), np.zeros(2))
        np.testing.assert_allclose(out, math.log(1.0 / 9.0), atol=1e-12)

    def test_effect_modes_need_config(self):
        with pytest.raises(ValueError, match="config"):
            inference_score(InferenceMode.TE, Fusion.SUM, GraphMode.FULL,
                            np.zeros(2), np.zeros(2), np.zeros(2))

    def test_tie_break_lowest_index(self):
        assert select_answer(np.array([0.0, 0.0, 0.0])) == 0
        assert select_answer(np.array([1.0, 2.0, 2.0])) == 1


class TestFusionProperties:
    def test_permutation_symmetry(self):
        rng = np.random.default_rng(41)
        for strategy in (Fusion.HM, Fusion.SUM):
            a, b, c = rng.uniform(-10, 10, (3, 50, 5))
            base = fuse(strategy, GraphMode.FULL, a, b, c)
            for p, q, r in itertools.permutations((a, b, c)):
                np.testing.assert_allclose(
                    fuse(strategy, GraphMode.FULL, p, q, r), base, atol=1e-12
                )

    def test_strictly_increasing_in_each_slot(self):
        rng = np.random.default_rng(42)
        for strategy in (Fusion.HM, Fusion.SUM):
            z = rng.uniform(-9.5, 9.5, (3, 200, 1))
            base = fuse(strategy, GraphMode.FULL, z[0], z[1], z[2])
            for slot in range(3):
                bumped = z.copy()
                bumped[slot] += 0.25
                higher = fuse(strategy, GraphMode.FULL, bumped[0], bumped[1], bumped[2])
                assert np.all(higher > base)

    def test_no_nan_inf_on_wide_range(self):
        rng = np.random.default_rng(43)
        zq, zv, zk = rng.uniform(-100, 100, (3, 500, 4))
        for strategy in (Fusion.HM, Fusion.SUM):
            out = fuse(strategy, GraphMode.FULL, zq, zv, zk)
            assert np.all(np.isfinite(out))
        out = fuse(Fusion.RUBI, GraphMode.SIMPLIFIED, zq, None, zk)
        assert np.all(np.isfinite(out))
        out = fuse(Fusion.LM, GraphMode.SIMPLIFIED, zq, None, zk,
                   g=rng.uniform(0, 3, (500, 1)))
        assert np.all(np.isfinite(out))

    def test_limit_dominance_extreme_negative_c(self):
        rng = np.random.default_rng(44)
        for strategy in (Fusion.HM, Fusion.SUM):
            for c in (-30.0, -60.0):
                cfg = CounterfactualConfig.uniform(c)
                for _ in range(50):
                    zq, zv, zk = rng.uniform(-10, 10, (3, 8))
                    d = decompose(strategy, GraphMode.FULL, zq, zv, zk, cfg)
                    fused = fuse(strategy, GraphMode.FULL, zq, zv, zk)
                    assert np.array_equal(np.argsort(d.tie), np.argsort(fused))


class TestScoreFloor:
    def test_floor_bounds_extreme_scores(self):
        out = fuse(Fusion.SUM, GraphMode.FULL, [-100.0], [-100.0], [-100.0])
        np.testing.assert_array_equal(out, SCORE_FLOOR)

    def test_floor_inactive_in_operating_range(self):
        rng = np.random.default_rng(45)
        zq, zv, zk = rng.uniform(-10, 10, (3, 200, 6))
        for strategy in (Fusion.HM, Fusion.SUM):
            out = fuse(strategy, GraphMode.FULL, zq, zv, zk)
            assert np.all(out > SCORE_FLOOR)

    def test_floored_entries_have_zero_grads(self):
        d_zq, d_zv, d_zk, _ = fuse_input_grads(
            Fusion.SUM, GraphMode.FULL, np.array([-80.0]), np.array([-80.0]),
            np.array([-80.0])
        )
        np.testing.assert_array_equal(d_zq, 0.0)
        np.testing.assert_array_equal(d_zv, 0.0)
        np.testing.assert_array_equal(d_zk, 0.0)


class TestFuseInputGrads:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(46)
        eps = 1e-6
        for strategy, mode in _strategy_grid():
            zq, zv, zk = rng.uniform(-4, 4, (3, 5))
            g = rng.uniform(0.5, 2.0) if strategy is Fusion.LM else None
            grads = fuse_input_grads(strategy, mode, zq, zv, zk, g=g)
            slots = {"q": zq, "k": zk}
            if mode is GraphMode.FULL:
                slots["v"] = zv
            for name, idx in (("q", 0), ("v", 1), ("k", 2)):
                if name not in slots:
                    continue
                analytic = grads[idx]
                for j in range(5):
                    args = {"q": zq.copy(), "v": zv.copy(), "k": zk.copy()}
                    args[name][j] += eps
                    hi = fuse(strategy, mode, args["q"],
                              args["v"] if mode is GraphMode.FULL else None,
                              args["k"], g=g)
                    args[name][j] -= 2 * eps
                    lo = fuse(strategy, mode, args["q"],
                              args["v"] if mode is GraphMode.FULL else None,
                              args["k"], g=g)
                    fd = (hi[j] - lo[j]) / (2 * eps)
                    np.testing.assert_allclose(analytic[j], fd, atol=1e-6)

    def test_detach_q_mask_zeroes_rubi_q_grad(self):
        d_zq, _, d_zk, _ = fuse_input_grads(
            Fusion.RUBI, GraphMode.SIMPLIFIED, np.array([1.0]), None,
            np.array([3.0]), detach_q_mask=True
        )
        np.testing.assert_array_equal(d_zq, 0.0)
        np.testing.assert_allclose(d_zk, ref_sigmoid(1.0), atol=1e-12)
