"""Tests for CL strategies - EWC, A-GEM, BiC, NCM, dynamic expansion and hook bundles."""

import numpy as np
import pytest

from cloodbench.errors import ConfigError
from cloodbench.models.experiment import OodTrainConfig
from cloodbench.services.datastream import Dataset, build_stream, gen_gaussian_tasks
from cloodbench.services.memory import Exemplar, PrototypeSet, prototype_update
from cloodbench.services.network import (
    Layer,
    OptimizerState,
    ParamSet,
    expand_head,
    flatten,
    forward,
    sgd_step,
    softmax,
    unflatten,
)
from cloodbench.services.ood_train import OodObjective
from cloodbench.services.strategies import (
    STRATEGIES,
    BiCLayer,
    ImportanceMap,
    Learner,
    agem_project,
    bic_apply,
    bic_fit,
    dynamic_expand,
    ewc_penalty,
    fisher_update,
    ncm_predict,
    stratified_holdout,
    strategy_hooks,
)
from cloodbench.services.trainer import TaskTrace, Trainer, new_learner


def _ones_like(params: ParamSet) -> ParamSet:
    return params.map(np.ones_like)


# --- EWC ---


class TestEwcPenalty:
    def test_zero_at_anchor(self, rng, make_params):
        params = make_params(rng, 3, [4], 2)
        assert ewc_penalty(params, ImportanceMap(_ones_like(params), params)) == 0.0

    def test_arithmetic(self, rng, make_params):
        params = make_params(rng, 2, [2], 2)
        theta = flatten(params)
        shift = np.zeros_like(theta)
        shift[0], shift[1] = 0.1, -0.2
        moved = unflatten(theta + shift, params)
        assert ewc_penalty(moved, ImportanceMap(_ones_like(params), params)) == pytest.approx(0.05)

    def test_quadratic_in_shift(self, rng, make_params):
        params = make_params(rng, 3, [4], 2)
        omega = params.map(lambda a: np.abs(rng.normal(size=a.shape)))
        delta = rng.normal(size=params.num_parameters()) * 0.1
        importance = ImportanceMap(omega, params)
        once = ewc_penalty(unflatten(flatten(params) + delta, params), importance)
        twice = ewc_penalty(unflatten(flatten(params) + 2 * delta, params), importance)
        assert twice == pytest.approx(4 * once)

    def test_new_parameters_with_zero_importance_are_free(self, rng, make_params):
        params = make_params(rng, 3, [4], 2)
        grown = expand_head(params, 2)
        importance = ImportanceMap(_ones_like(params), params).resized(grown)
        moved_head = grown.head_weight + np.vstack([np.zeros((2, 4)), np.ones((2, 4))])
        grown = grown.with_arrays(grown.arrays()[:-2] + [moved_head, grown.head_bias])
        assert ewc_penalty(grown, importance) == 0.0


class TestFisher:
    def test_matches_logistic_closed_form(self, rng):
        w = 0.7
        params = ParamSet(((Layer(np.ones((1, 1)), np.zeros(1), "identity"),),), np.array([[w], [0.0]]), np.zeros(2))
        x = rng.normal(size=(25, 1))
        y = rng.integers(0, 2, size=25)
        omega = fisher_update(params, Dataset(x, y), num_samples=25)

        p0 = 1.0 / (1.0 + np.exp(-w * x[:, 0]))
        expected = np.mean((p0 - (y == 0)) ** 2 * x[:, 0] ** 2)
        assert omega.head_weight[0, 0] == pytest.approx(expected, rel=1e-6)

    def test_nonnegative(self, rng, make_params):
        params = make_params(rng, 3, [4], 3)
        data = Dataset(rng.normal(size=(10, 3)), rng.integers(0, 3, size=10))
        assert np.all(flatten(fisher_update(params, data, 10)) >= 0)

    def test_zero_gradients_zero_importance(self, rng):
        # one-hot confident predictions drive every per-sample gradient to zero
        params = ParamSet(((Layer(np.zeros((2, 2)), np.zeros(2)),),), np.zeros((2, 2)), np.array([800.0, 0.0]))
        data = Dataset(rng.normal(size=(5, 2)), np.zeros(5, dtype=int))
        assert np.all(flatten(fisher_update(params, data, 5)) == 0)

    def test_accumulates_previous(self, rng, make_params):
        params = make_params(rng, 3, [4], 2)
        data = Dataset(rng.normal(size=(6, 3)), rng.integers(0, 2, size=6))
        once = fisher_update(params, data, 6)
        twice = fisher_update(params, data, 6, previous=once)
        np.testing.assert_allclose(flatten(twice), 2 * flatten(once))

    def test_subsample_uses_rng(self, rng, make_params):
        params = make_params(rng, 3, [4], 2)
        data = Dataset(rng.normal(size=(30, 3)), rng.integers(0, 2, size=30))
        a = fisher_update(params, data, 5, np.random.default_rng(1))
        b = fisher_update(params, data, 5, np.random.default_rng(1))
        np.testing.assert_array_equal(flatten(a), flatten(b))

    def test_empty_dataset(self, rng, make_params):
        with pytest.raises(ConfigError):
            fisher_update(make_params(rng, 3, [4], 2), Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int)), 5)


# --- A-GEM ---


class TestAgemProject:
    def test_no_conflict(self):
        np.testing.assert_array_equal(agem_project(np.array([1.0, 0.0]), np.array([1.0, 0.0])), [1.0, 0.0])

    def test_conflict_projected_orthogonal(self):
        out = agem_project(np.array([1.0, -2.0]), np.array([0.0, 1.0]))
        np.testing.assert_allclose(out, [1.0, 0.0])
        assert out @ np.array([0.0, 1.0]) == pytest.approx(0.0)

    def test_antiparallel(self):
        np.testing.assert_allclose(agem_project(np.array([-1.0, 0.0]), np.array([1.0, 0.0])), [0.0, 0.0])

    def test_degenerate_reference(self, caplog):
        g = np.array([1.0, 2.0])
        out = agem_project(g, np.array([-1e-13, 0.0]))
        np.testing.assert_array_equal(out, g)
        assert "degenerate" in caplog.text

    def test_never_negative_against_reference(self, rng):
        for _ in range(1000):
            g, g_ref = rng.normal(size=7), rng.normal(size=7)
            assert agem_project(g, g_ref) @ g_ref >= -1e-9


# --- BiC ---


class TestBiC:
    def test_identity_layer(self):
        z = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(bic_apply(z, BiCLayer([(1, 3, 1.0, 0.0)])), z)

    def test_arithmetic(self):
        out = bic_apply(np.array([[5.0, 2.0]]), BiCLayer([(1, 2, 0.5, 1.0)]))
        assert out[0, 1] == pytest.approx(2.0)
        assert out[0, 0] == 5.0

    def test_only_newest_stage_applied(self):
        layer = BiCLayer([(0, 1, 10.0, 10.0), (1, 2, 2.0, 0.0)])
        np.testing.assert_array_equal(bic_apply(np.array([[1.0, 1.0]]), layer), [[1.0, 2.0]])

    def test_old_logits_untouched(self, rng):
        z = rng.normal(size=(10, 6))
        out = bic_apply(z, BiCLayer([(4, 6, 0.3, -2.0)]))
        np.testing.assert_array_equal(out[:, :4], z[:, :4])

    def test_shift_recovers_inflation(self):
        rng = np.random.default_rng(3)
        n, c = 20000, 1.5
        logits = 2.0 * rng.normal(size=(n, 4))
        cdf = np.cumsum(softmax(logits), axis=1)
        labels = np.minimum((cdf < rng.random(n)[:, None]).sum(axis=1), 3)
        inflated = logits.copy()
        inflated[:, 2:] += c
        alpha, beta = bic_fit(inflated, labels, (2, 4), fit_scale=False)
        assert alpha == 1.0
        assert beta == pytest.approx(-c, abs=0.1)

    def test_missing_side_gives_identity(self, caplog):
        logits = np.zeros((4, 4))
        assert bic_fit(logits, np.array([0, 1, 0, 1]), (2, 4)) == (1.0, 0.0)
        assert "BiC fit skipped" in caplog.text

    def test_fit_scale_lowers_loss(self, rng):
        logits = rng.normal(size=(200, 4))
        labels = rng.integers(0, 4, size=200)
        logits[:, 2:] += 3.0
        alpha, beta = bic_fit(logits, labels, (2, 4))

        def _ce(z):
            return -np.mean(np.log(softmax(z)[np.arange(200), labels]))

        fitted = bic_apply(logits, BiCLayer([(2, 4, alpha, beta)]))
        assert _ce(fitted) < _ce(logits)

    def test_add_stage_resets_older_stages(self):
        layer = BiCLayer()
        layer.add_stage(0, 2)
        layer.add_stage(2, 4, 0.5, 1.0)
        layer.add_stage(4, 6, 0.8, -0.2)
        assert layer.stages == [(0, 2, 1.0, 0.0), (2, 4, 1.0, 0.0), (4, 6, 0.8, -0.2)]

    def test_add_stage_rejects_gap(self):
        layer = BiCLayer([(0, 2, 1.0, 0.0)])
        with pytest.raises(ConfigError):
            layer.add_stage(3, 4)
        with pytest.raises(ConfigError):
            BiCLayer().add_stage(1, 2)

    def test_every_stage_applied_equals_newest(self, rng):
        layer = BiCLayer()
        layer.add_stage(0, 2)
        layer.add_stage(2, 4, 0.7, 0.4)
        layer.add_stage(4, 6, 1.3, -0.5)
        z = rng.normal(size=(5, 6))
        full = z.copy()
        for start, end, alpha, beta in layer.stages:
            full[:, start:end] = alpha * full[:, start:end] + beta
        np.testing.assert_allclose(bic_apply(z, layer), full)


class TestStratifiedHoldout:
    def test_every_class_represented(self, rng):
        data = Dataset(rng.normal(size=(40, 2)), np.repeat([0, 1, 2, 3], 10))
        train, val = stratified_holdout(data, 0.1, rng)
        assert len(train) + len(val) == 40
        assert set(val.classes.tolist()) == {0, 1, 2, 3}


# --- NCM ---


class TestNcm:
    def test_nearest_prototype(self):
        protos = PrototypeSet(np.eye(2), np.array([1, 1]))
        assert ncm_predict(protos, np.array([0.9, 0.1]))[0] == 0

    def test_tie_goes_to_lower_index(self):
        protos = PrototypeSet(np.eye(2), np.array([1, 1]))
        assert ncm_predict(protos, np.array([0.5, 0.5]))[0] == 0

    def test_absent_class_never_predicted(self):
        protos = PrototypeSet(np.array([[0.0, 0.0], [5.0, 5.0]]), np.array([0, 3]))
        assert ncm_predict(protos, np.zeros(2))[0] == 1

    def test_empty_prototypes(self):
        with pytest.raises(ConfigError):
            ncm_predict(PrototypeSet(np.zeros((2, 2)), np.zeros(2, dtype=int)), np.zeros(2))

    def test_accuracy_on_separated_blobs(self):
        train, test = gen_gaussian_tasks(8, 16, 200, 10.0, seed=0)
        protos = prototype_update(None, train.inputs, train.labels)
        assert np.mean(ncm_predict(protos, test.inputs) == test.labels) >= 0.95

    def test_learner_uses_ncm_when_enabled(self, rng, make_params):
        params = make_params(rng, 3, [4], 2)
        learner = Learner(params, OptimizerState(lr=0.1))
        x = rng.normal(size=(5, 3))
        features = forward(params, x).features
        learner.prototypes = PrototypeSet(np.vstack([features[0], features[1]]), np.array([1, 1]))
        learner.use_ncm = True
        np.testing.assert_array_equal(learner.predict(x), ncm_predict(learner.prototypes, features))


# --- Dynamic expansion ---


class TestDynamicExpand:
    def test_logits_unchanged_after_expansion(self, rng, make_params):
        params = make_params(rng, 3, [5], 2)
        expanded, _ = dynamic_expand(params, [4], rng)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(forward(expanded, x).logits, forward(params, x).logits, rtol=1e-12, atol=1e-12)

    def test_frozen_branches_bit_identical(self, rng, make_params):
        params = make_params(rng, 3, [5], 2)
        expanded, mask = dynamic_expand(params, [4], rng)
        state = OptimizerState(lr=0.1, weight_decay=0.01)
        current = expanded
        for _ in range(5):
            grads = current.map(lambda a: rng.normal(size=a.shape))
            current = sgd_step(current, grads, state, epoch=0, mask=mask)
        for before, after in zip(expanded.branches[0], current.branches[0], strict=True):
            np.testing.assert_array_equal(before.weight, after.weight)
            np.testing.assert_array_equal(before.bias, after.bias)
        assert not np.array_equal(expanded.branches[1][0].weight, current.branches[1][0].weight)

    def test_feature_dim_grows_by_branch_width(self, rng, make_params):
        params = make_params(rng, 3, [5], 2)
        for t in range(1, 4):
            params, _ = dynamic_expand(params, [6], rng)
            assert params.feature_dim == 5 + 6 * t


# --- Hook bundles ---


class TestStrategyHooks:
    def test_all_kinds_registered(self):
        assert set(STRATEGIES) == {
            "naive",
            "cumulative",
            "replay",
            "gdumb",
            "lwf",
            "ewc",
            "agem",
            "icarl-lite",
            "bic",
            "dynamic-er-lite",
            "feature-replay",
        }

    def test_unknown_kind(self, small_cfg):
        with pytest.raises(ConfigError):
            strategy_hooks("der", small_cfg, seed=0)

    def test_buffer_policy_defaults(self, small_cfg):
        assert strategy_hooks("naive", small_cfg, 0).buffer is None
        assert strategy_hooks("replay", small_cfg, 0).buffer.policy == "reservoir"
        assert strategy_hooks("icarl-lite", small_cfg, 0).buffer.policy == "class-balanced"
        assert strategy_hooks("feature-replay", small_cfg, 0).buffer.mode == "feature"

    def test_buffer_policy_override(self, make_config):
        cfg = make_config(strategy={"kind": "replay", "buffer_policy": "class-balanced"})
        assert strategy_hooks("replay", cfg, 0).buffer.policy == "class-balanced"

    def test_naive_is_plain_ce(self, small_cfg, small_stream):
        learner = new_learner(small_cfg, small_stream.train[0].dim, 0)
        learner.params = expand_head(learner.params, 2)
        strategy = strategy_hooks("naive", small_cfg, 0)
        data = strategy.before_task(learner, small_stream, 0)
        assert data is small_stream.train[0]
        terms = strategy.assemble_loss(learner, data.inputs[:4], data.labels[:4])
        assert [t.name for t in terms] == ["ce"]


def _train_all(cfg, stream, seed: int = 0):
    trainer = Trainer(cfg, seed)
    learner = new_learner(cfg, stream.train[0].dim, seed)
    traces = [trainer.train_task(learner, stream, b) for b in range(stream.num_tasks)]
    return trainer, learner, traces


class TestTrainerIntegration:
    def test_cumulative_trains_on_union(self, small_stream, make_config):
        cfg = make_config(strategy={"kind": "cumulative"})
        _, _, traces = _train_all(cfg, small_stream)
        assert traces[0].samples == len(small_stream.train[0])
        assert traces[1].samples == len(small_stream.train[0]) + len(small_stream.train[1])

    def test_inert_ood_objective_leaves_training_unchanged(self, small_stream, make_config):
        cfg = make_config(strategy={"kind": "replay"})

        def _history(ood):
            steps = []
            trainer = Trainer(cfg, 0, ood, on_step=lambda learner: steps.append(flatten(learner.params)))
            learner = new_learner(cfg, small_stream.train[0].dim, 0)
            for b in range(small_stream.num_tasks):
                trainer.train_task(learner, small_stream, b)
            return steps

        plain = _history(None)
        hooked = _history(OodObjective(OodTrainConfig(kind="none"), batch_size=cfg.optimizer.batch_size))
        assert len(plain) == len(hooked) > 0
        for a, b in zip(plain, hooked, strict=True):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize(
        ("kind", "section"),
        [("lwf", {"kd_weight": 0.0}), ("ewc", {"reg_weight": 0.0})],
    )
    def test_zero_weight_regularizers_match_naive(self, small_stream, make_config, kind, section):
        _, naive, _ = _train_all(make_config(strategy={"kind": "naive"}), small_stream)
        _, other, _ = _train_all(make_config(strategy={"kind": kind, **section}), small_stream)
        np.testing.assert_array_equal(flatten(naive.params), flatten(other.params))

    def test_gdumb_depends_only_on_buffer_contents(self, small_stream, make_config):
        cfg = make_config(strategy={"kind": "gdumb"})
        rows = small_stream.train[0]
        entries = [Exemplar(rows.inputs[i].copy(), int(rows.labels[i])) for i in range(8)]

        results = []
        for order in (entries, list(reversed(entries))):
            trainer = Trainer(cfg, seed=0)
            learner = new_learner(cfg, rows.dim, 0)
            learner.params = expand_head(learner.params, 2)
            trainer.strategy.buffer.entries = list(order)
            trainer._retrain_from_buffer(learner, TaskTrace(task=1, samples=0))
            results.append(flatten(learner.params))
        np.testing.assert_array_equal(results[0], results[1])

    def test_dynamic_er_grows_and_freezes(self, small_stream, make_config):
        cfg = make_config(strategy={"kind": "dynamic-er-lite"})
        _, learner, _ = _train_all(cfg, small_stream)
        assert len(learner.params.branches) == 2
        assert learner.frozen_mask is not None
        assert np.all(learner.frozen_mask.branches[0][0].weight == 0)

    def test_icarl_enables_ncm(self, small_stream, make_config):
        _, learner, _ = _train_all(make_config(strategy={"kind": "icarl-lite"}), small_stream)
        assert learner.use_ncm
        assert len(learner.prototypes.present) == 4

    def test_bic_fits_stage_on_second_task(self, small_stream, make_config):
        _, learner, _ = _train_all(make_config(strategy={"kind": "bic"}), small_stream)
        assert learner.bic is not None
        assert learner.bic.newest[:2] == (2, 4)

    def test_bic_stages_partition_seen_classes(self, make_config):
        cfg = make_config(stream={"num_classes": 6, "num_tasks": 3}, strategy={"kind": "bic"})
        stream = build_stream(cfg.stream, 0).stream
        _, learner, _ = _train_all(cfg, stream)
        assert [stage[:2] for stage in learner.bic.stages] == [(0, 2), (2, 4), (4, 6)]
        assert all(stage[2:] == (1.0, 0.0) for stage in learner.bic.stages[:-1])

    @pytest.mark.parametrize("kind", sorted(STRATEGIES))
    def test_every_strategy_runs(self, small_stream, make_config, kind):
        _, learner, traces = _train_all(make_config(strategy={"kind": kind}), small_stream)
        assert learner.params.num_classes == 4
        assert learner.params.is_finite()
        assert len(traces) == 2
