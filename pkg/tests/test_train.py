"""Tests for the training losses and the fit loop."""

import copy
import math

import numpy as np
import pytest

from cf_effects.data import SyntheticTaskSpec, generate, split_to_arrays
from cf_effects.effects import CfMode, CounterfactualConfig, Fusion, GraphMode
from cf_effects.model import EnsembleModel, ModelConfig
from cf_effects.nn import finite_difference_check
from cf_effects.train import (
    TRAINING_LOG_COLUMNS,
    TrainConfig,
    classification_loss,
    fit,
    kl_loss,
    write_training_log,
)


def tiny_spec(**overrides):
    base = dict(
        num_answers=5,
        num_qtypes=2,
        context_map=((0, 1, 2), (2, 3, 4)),
        train_prior=((0.7, 0.2, 0.1), (0.7, 0.2, 0.1)),
        test_prior=((0.1, 0.2, 0.7), (0.1, 0.2, 0.7)),
        visual_snr=1.0,
        spurious_strength=0.8,
        train_size=256,
        val_size=64,
        test_size=64,
        seed=1,
    )
    base.update(overrides)
    return SyntheticTaskSpec(**base)


def tiny_model(**overrides):
    base = dict(num_answers=5, num_qtypes=2, hidden_size=4, seed=2)
    base.update(overrides)
    return EnsembleModel(ModelConfig(**base))


def random_batch(rng, model, n=16):
    v = rng.normal(size=(n, model.config.num_answers))
    q = rng.normal(size=(n, model.config.num_qtypes))
    y = rng.integers(0, model.config.num_answers, size=n)
    return v, q, y


def zeroed(model):
    for p in model.store.params.values():
        p.fill(0.0)
    return model


class TestClassificationLoss:
    def test_zero_init_sum_model_closed_form(self):
        model = zeroed(tiny_model(num_answers=3, num_qtypes=2))
        rng = np.random.default_rng(0)
        for _ in range(3):
            v, q, y = random_batch(rng, model)
            model.store.zero_grads()
            report, _ = classification_loss(model, v, q, y)
            np.testing.assert_allclose(report.l_vqa, math.log(3.0), atol=1e-9)
            np.testing.assert_allclose(report.l_qa, math.log(3.0), atol=1e-9)
            np.testing.assert_allclose(report.l_va, math.log(3.0), atol=1e-9)
            np.testing.assert_allclose(
                report.l_vqa + report.l_qa + report.l_va, 3 * math.log(3.0), atol=1e-9
            )

    def test_perfect_branches_give_near_zero_loss(self):
        model = zeroed(tiny_model())
        rng = np.random.default_rng(1)
        n = 8
        # Every branch emits +1e4 for class 3 and -1e4 elsewhere via its
        # output bias; the zeroed trunk contributes nothing.
        for name in ("f_q/b2", "f_v/b2", "f_vq/b2"):
            model.store.params[name].fill(-1e4)
            model.store.params[name][3] = 1e4
        y = np.full(n, 3)
        v, q = rng.normal(size=(n, 5)), rng.normal(size=(n, 2))
        model.store.zero_grads()
        report, _ = classification_loss(model, v, q, y)
        assert report.l_vqa + report.l_qa + report.l_va < 1e-6

    def test_gradients_pass_finite_difference_check(self):
        for strategy, mode in [
            (Fusion.SUM, GraphMode.FULL),
            (Fusion.HM, GraphMode.FULL),
            (Fusion.SUM, GraphMode.SIMPLIFIED),
            (Fusion.RUBI, GraphMode.SIMPLIFIED),
            (Fusion.LM, GraphMode.SIMPLIFIED),
        ]:
            model = tiny_model(strategy=strategy, mode=mode)
            rng = np.random.default_rng(3)
            v, q, y = random_batch(rng, model)

            def loss_fn(params):
                report, _ = classification_loss(model, v, q, y)
                model.store.zero_grads()
                return report.l_vqa + report.l_qa + report.l_va

            model.store.zero_grads()
            classification_loss(model, v, q, y)
            grads = {k: g.copy() for k, g in model.store.grads.items()}
            model.store.zero_grads()
            err = finite_difference_check(loss_fn, model.store.params, grads)
            assert err < 1e-4, f"{strategy} {mode}: fd error {err}"

    def test_value_invariant_to_counterfactual_values(self):
        model = tiny_model()
        rng = np.random.default_rng(4)
        v, q, y = random_batch(rng, model)
        model.store.zero_grads()
        before, _ = classification_loss(model, v, q, y)
        model.cf = CounterfactualConfig.uniform(rng.uniform(-4, 4))
        model.store.zero_grads()
        after, _ = classification_loss(model, v, q, y)
        assert before.total == after.total

    def test_empty_batch_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="non-empty"):
            classification_loss(model, np.zeros((0, 5)), np.zeros((0, 2)),
                                np.zeros(0, dtype=int))


class TestKlLoss:
    def test_uniform_distributions_closed_form(self):
        model = zeroed(tiny_model(num_answers=3, num_qtypes=2))
        rng = np.random.default_rng(5)
        v, q, _ = random_batch(rng, model)
        loss, _ = kl_loss(model, v, q)
        np.testing.assert_allclose(loss, math.log(3.0) / 3.0, atol=1e-9)

    def test_one_hot_factual_uniform_counterfactual(self):
        model = zeroed(tiny_model(num_answers=3, num_qtypes=2))
        model.store.params["f_vq/b2"][1] = 1e4
        rng = np.random.default_rng(6)
        v, q, _ = random_batch(rng, model)
        # Factual softmax is one-hot on class 1; counterfactual stays uniform
        # because z_q is identically zero.
        loss, _ = kl_loss(model, v, q)
        np.testing.assert_allclose(loss, math.log(3.0) / 3.0, atol=1e-9)

    def test_gradient_matches_finite_differences(self):
        for strategy, mode, cf_mode in [
            (Fusion.SUM, GraphMode.FULL, CfMode.UNIFORM),
            (Fusion.HM, GraphMode.FULL, CfMode.UNIFORM),
            (Fusion.SUM, GraphMode.FULL, CfMode.RANDOM),
            (Fusion.RUBI, GraphMode.SIMPLIFIED, CfMode.UNIFORM),
            (Fusion.LM, GraphMode.SIMPLIFIED, CfMode.RANDOM),
        ]:
            model = tiny_model(strategy=strategy, mode=mode, cf_mode=cf_mode)
            rng = np.random.default_rng(7)
            v, q, _ = random_batch(rng, model)
            _, analytic = kl_loss(model, v, q)
            cf_params = {"c": model.cf.values}

            def loss_fn(params):
                return kl_loss(model, v, q)[0]

            err = finite_difference_check(loss_fn, cf_params, {"c": analytic})
            assert err < 1e-4, f"{strategy} {mode} {cf_mode}: fd error {err}"

    def test_no_gradient_reaches_branch_parameters(self):
        model = tiny_model()
        rng = np.random.default_rng(8)
        v, q, _ = random_batch(rng, model)
        model.store.zero_grads()
        kl_loss(model, v, q)
        for name, g in model.store.grads.items():
            np.testing.assert_array_equal(g, 0.0, err_msg=name)

    def test_prior_mode_gradient_is_zero(self):
        model = EnsembleModel(
            ModelConfig(num_answers=5, num_qtypes=2, hidden_size=4, seed=2,
                        cf_mode=CfMode.PRIOR),
            train_prior=np.array([0.3, 0.3, 0.2, 0.1, 0.1]),
        )
        rng = np.random.default_rng(9)
        v, q, _ = random_batch(rng, model)
        _, grad = kl_loss(model, v, q)
        np.testing.assert_array_equal(grad, 0.0)


class TestFit:
    def test_zero_epochs_leaves_model_unchanged(self):
        spec = tiny_spec()
        splits = generate(spec)
        model = tiny_model()
        before = copy.deepcopy(model.store.params)
        result = fit(model, splits["train"], splits["val"], TrainConfig(epochs=0))
        assert result.epoch_reports == []
        for name, p in model.store.params.items():
            np.testing.assert_array_equal(p, before[name])

    def test_training_reduces_classification_loss(self):
        spec = tiny_spec(train_size=512)
        splits = generate(spec)
        model = tiny_model(hidden_size=16)
        result = fit(model, splits["train"], splits["val"],
                     TrainConfig(epochs=8, seed=5))
        first = result.epoch_reports[0]
        last = result.epoch_reports[-1]
        cls = lambda r: r.l_vqa + r.l_qa + r.l_va
        assert cls(last) < cls(first)

    def test_same_seed_gives_identical_parameters(self):
        spec = tiny_spec()
        splits = generate(spec)
        finals = []
        for _ in range(2):
            model = tiny_model()
            fit(model, splits["train"], splits["val"], TrainConfig(epochs=2, seed=3))
            finals.append({k: p.copy() for k, p in model.store.params.items()}
                          | {"cf": model.cf.values.copy()})
        for key in finals[0]:
            np.testing.assert_array_equal(finals[0][key], finals[1][key])

    def test_kl_step_updates_only_c(self):
        model = tiny_model()
        rng = np.random.default_rng(10)
        v, q, _ = random_batch(rng, model)
        from cf_effects.nn import AdamState, adam_step

        before = {k: p.copy() for k, p in model.store.params.items()}
        c_before = model.cf.values.copy()
        cf_params = {"c": model.cf.values}
        state = AdamState.for_params(cf_params)
        _, c_grad = kl_loss(model, v, q)
        adam_step(cf_params, {"c": c_grad}, state, lr=1e-2)
        for name, p in model.store.params.items():
            np.testing.assert_array_equal(p, before[name], err_msg=name)
        assert not np.array_equal(model.cf.values, c_before)

    def test_loss_report_total_is_exact_sum(self):
        spec = tiny_spec()
        splits = generate(spec)
        model = tiny_model()
        result = fit(model, splits["train"], splits["val"], TrainConfig(epochs=1))
        r = result.epoch_reports[0]
        assert r.total == r.l_vqa + r.l_qa + r.l_va + r.l_kl

    def test_training_log_columns(self, tmp_path):
        spec = tiny_spec()
        splits = generate(spec)
        model = tiny_model()
        result = fit(model, splits["train"], splits["val"], TrainConfig(epochs=2))
        path = tmp_path / "log.csv"
        write_training_log(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(TRAINING_LOG_COLUMNS)
        assert len(lines) == 3
        for line in lines[1:]:
            for cell in line.split(","):
                float(cell)  # plain decimal cells, no wrapped scalar reprs

    def test_simplified_mode_has_zero_va_loss(self):
        spec = tiny_spec()
        splits = generate(spec)
        model = tiny_model(mode=GraphMode.SIMPLIFIED)
        result = fit(model, splits["train"], splits["val"], TrainConfig(epochs=1))
        assert result.epoch_reports[0].l_va == 0.0

    def test_divergence_aborts_with_location(self):
        spec = tiny_spec()
        splits = generate(spec)
        model = tiny_model()
        model.store.params["f_q/w0"].fill(1e308)
        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(ValueError, match="epoch 0, batch 0"):
            fit(model, splits["train"], splits["val"], TrainConfig(epochs=1))
