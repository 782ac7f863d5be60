"""Tests for post-hoc OOD detectors, their reductions and incremental statistics."""

import math

import numpy as np
import pytest

from cloodbench.errors import ConfigError, DetectorError
from cloodbench.models.experiment import DETECTOR_KINDS, CalibrationConfig
from cloodbench.services.datastream import Dataset
from cloodbench.services.detectors import (
    DetectorSuite,
    FeatureIndex,
    GaussianStats,
    ash_apply,
    dice_fit,
    dice_logits,
    knn_score,
    maha_score,
    maha_update,
    nearest_rank,
    odin_score,
    react_apply,
    react_fit,
    score_basic,
    she_fit,
    she_score,
    temp_fit,
    threshold_decide,
    threshold_fit,
    vim_fit,
    vim_residual,
)
from cloodbench.services.memory import Exemplar, ExemplarBuffer
from cloodbench.services.metrics import auroc
from cloodbench.services.network import Layer, OptimizerState, ParamSet
from cloodbench.services.strategies import Learner, dynamic_expand


@pytest.fixture
def learner(rng, make_params):
    return Learner(make_params(rng, 3, [6], 4), OptimizerState(lr=0.1))


@pytest.fixture
def calib_task(rng):
    return Dataset(rng.normal(size=(40, 3)), np.repeat([0, 1, 2, 3], 10))


# --- Output scores ---


class TestScoreBasic:
    def test_msp_uniform(self):
        assert score_basic("msp", np.array([0.0, 0.0]))[0] == pytest.approx(-0.5)

    def test_energy_uniform(self):
        assert score_basic("energy", np.array([0.0, 0.0]))[0] == pytest.approx(-math.log(2))

    def test_entropy_extremes(self):
        assert score_basic("entropy", np.array([800.0, 0.0, 0.0]))[0] == pytest.approx(0.0)
        assert score_basic("entropy", np.zeros(4))[0] == pytest.approx(math.log(4))

    def test_maxlogit(self):
        assert score_basic("maxlogit", np.array([2.0, 1.0, 0.0]))[0] == -2.0

    def test_energy_temperature(self):
        z = np.array([[1.0, 3.0]])
        expected = -2.0 * np.log(np.exp(0.5) + np.exp(1.5))
        assert score_basic("energy", z, 2.0)[0] == pytest.approx(expected)

    def test_global_shift(self, rng):
        z = rng.normal(size=(20, 5))
        for kind in ("msp", "entropy"):
            np.testing.assert_allclose(score_basic(kind, z + 3.0), score_basic(kind, z), atol=1e-12)
        for kind in ("energy", "maxlogit"):
            np.testing.assert_allclose(score_basic(kind, z + 3.0), score_basic(kind, z) - 3.0, atol=1e-12)

    def test_global_shift_keeps_auroc(self, rng):
        ind, ood = rng.normal(size=(30, 4)) * 3, rng.normal(size=(30, 4))
        for kind in ("msp", "maxlogit", "energy", "entropy"):
            before = auroc(score_basic(kind, ind), score_basic(kind, ood))
            after = auroc(score_basic(kind, ind + 2.5), score_basic(kind, ood + 2.5))
            assert before == pytest.approx(after)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            score_basic("gradnorm", np.zeros((1, 2)))


class TestOdin:
    def test_reduces_to_msp(self, learner, rng):
        x = rng.normal(size=(25, 3))
        _, logits = learner.infer(x)
        np.testing.assert_allclose(odin_score(learner, x, 1.0, 0.0), score_basic("msp", logits))

    def test_high_temperature_goes_uniform(self, learner, rng):
        scores = odin_score(learner, rng.normal(size=(5, 3)), 1e6, 0.0)
        np.testing.assert_allclose(scores, -0.25, atol=1e-4)

    def test_perturbation_raises_confidence(self, rng):
        params = ParamSet(
            ((Layer(rng.normal(size=(4, 3)), rng.normal(size=4), "identity"),),),
            rng.normal(size=(3, 4)),
            rng.normal(size=3),
        )
        linear = Learner(params, OptimizerState(lr=0.1))
        x = rng.normal(size=(100, 3))
        base = odin_score(linear, x, 1.0, 0.0)
        perturbed = odin_score(linear, x, 1.0, 1e-4)
        assert np.mean(perturbed <= base) >= 0.99


# --- Feature shaping ---


class TestReact:
    def test_nearest_rank(self):
        assert react_fit(np.array([1.0, 2.0, 3.0]), 50.0) == 2.0

    def test_clamp(self):
        np.testing.assert_array_equal(react_apply(np.array([0.5, 3.0]), 1.0), [0.5, 1.0])

    def test_p100_is_max(self, rng):
        h = rng.normal(size=(10, 4))
        assert react_fit(h, 100.0) == h.max()


class TestDice:
    def test_toy_mask(self):
        mask = dice_fit(np.array([[1.0, 2.0], [3.0, -4.0]]), np.array([1.0, 1.0]), 0.5)
        np.testing.assert_array_equal(mask, [[0, 1], [1, 0]])

    def test_keep_all_is_base(self, rng):
        w, b, h = rng.normal(size=(3, 5)), rng.normal(size=3), rng.normal(size=(4, 5))
        mask = dice_fit(w, h.mean(axis=0), 1.0)
        np.testing.assert_allclose(dice_logits(h, w, b, mask), h @ w.T + b)

    def test_keep_none_is_bias(self, rng):
        w, b, h = rng.normal(size=(3, 5)), rng.normal(size=3), rng.normal(size=(4, 5))
        mask = dice_fit(w, h.mean(axis=0), 0.0)
        np.testing.assert_array_equal(dice_logits(h, w, b, mask), np.tile(b, (4, 1)))

    def test_keep_out_of_range(self):
        with pytest.raises(ConfigError):
            dice_fit(np.ones((1, 2)), np.ones(2), 1.5)


class TestAsh:
    def test_prune_zero_is_identity(self, rng):
        h = rng.normal(size=(3, 6))
        np.testing.assert_array_equal(ash_apply(h, 0.0), h)

    def test_prune_half(self):
        np.testing.assert_array_equal(ash_apply(np.array([1.0, 2.0, 3.0, 4.0]), 50.0), [[0.0, 0.0, 3.0, 4.0]])

    def test_scale_full_share_multiplies_by_e(self, rng):
        h = np.abs(rng.normal(size=(3, 4))) + 0.1
        np.testing.assert_allclose(ash_apply(h, 0.0, "scale"), h * math.e)

    def test_percentile_out_of_range(self):
        with pytest.raises(ConfigError):
            ash_apply(np.ones(3), 100.0)


class TestTemperature:
    def _calibrated(self):
        m = math.log(3.0)
        logits = np.tile([m / 2, -m / 2], (4, 1))
        return logits, np.array([0, 0, 0, 1])

    def test_calibrated_set_gives_one(self):
        logits, labels = self._calibrated()
        assert temp_fit(logits, labels) == pytest.approx(1.0, abs=0.05)

    def test_scaled_set_gives_ten(self):
        logits, labels = self._calibrated()
        assert temp_fit(10.0 * logits, labels) == pytest.approx(10.0, abs=0.5)

    def test_empty(self):
        with pytest.raises(DetectorError):
            temp_fit(np.zeros((0, 2)), np.zeros(0, dtype=int))


# --- Mahalanobis ---


def _batch_covariance(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    scatter = np.zeros((features.shape[1],) * 2)
    for c in np.unique(labels):
        centered = features[labels == c] - features[labels == c].mean(axis=0)
        scatter += centered.T @ centered
    return scatter / len(labels)


class TestMahalanobis:
    def test_one_dimensional(self):
        stats = GaussianStats(np.zeros((1, 1)), np.array([1]), np.array([[4.0]]), 1)
        assert maha_score(stats, np.array([[2.0]]))[0] == pytest.approx(1.0, rel=1e-5)

    def test_at_mean_is_zero(self, rng):
        features = rng.normal(size=(50, 3))
        stats = maha_update(None, features, np.repeat([0, 1], 25))
        assert maha_score(stats, stats.means[1])[0] == pytest.approx(0.0, abs=1e-9)

    def test_identity_covariance_is_squared_euclidean(self):
        # four points per class at mu +- sqrt(2) e_j pool to an identity covariance
        base = np.vstack([np.eye(2), -np.eye(2)])
        features = np.vstack([base, base + 5.0]) * math.sqrt(2.0)
        labels = np.repeat([0, 1], 4)
        stats = maha_update(None, features, labels)
        np.testing.assert_allclose(stats.covariance, np.eye(2), atol=1e-12)
        q = np.array([[0.3, -0.7]])
        assert maha_score(stats, q)[0] == pytest.approx(float(np.sum(q**2)), rel=1e-5)

    def test_matches_brute_force(self, rng):
        features = rng.normal(size=(100, 4))
        labels = rng.integers(0, 5, size=100)
        stats = maha_update(None, features, labels)
        queries = rng.normal(size=(10, 4))
        inv = np.linalg.inv(stats.covariance + 1e-6 * np.eye(4))
        brute = [min((q - stats.means[c]) @ inv @ (q - stats.means[c]) for c in range(5)) for q in queries]
        np.testing.assert_allclose(maha_score(stats, queries), brute, rtol=1e-9)

    def test_incremental_equals_batch(self, rng):
        features = rng.normal(size=(90, 3)) @ rng.normal(size=(3, 3))
        labels = np.repeat(np.arange(6), 15)
        stats = None
        for t in range(3):
            rows = (labels >= 2 * t) & (labels < 2 * t + 2)
            stats = maha_update(stats, features[rows], labels[rows])
        np.testing.assert_allclose(stats.covariance, _batch_covariance(features, labels), atol=1e-6)
        for c in range(6):
            np.testing.assert_allclose(stats.means[c], features[labels == c].mean(axis=0), atol=1e-12)

    def test_merge_of_same_class_chunks(self, rng):
        features = rng.normal(size=(40, 2))
        labels = np.zeros(40, dtype=int)
        split = maha_update(maha_update(None, features[:15], labels[:15]), features[15:], labels[15:])
        whole = maha_update(None, features, labels)
        np.testing.assert_allclose(split.scatter, whole.scatter, atol=1e-9)
        np.testing.assert_allclose(split.means, whole.means, atol=1e-12)

    def test_old_means_untouched(self, rng):
        stats = maha_update(None, rng.normal(size=(10, 2)), np.zeros(10, dtype=int))
        before = stats.means[0].copy()
        stats = maha_update(stats, rng.normal(size=(10, 2)), np.ones(10, dtype=int))
        np.testing.assert_array_equal(stats.means[0], before)

    def test_singular_covariance(self):
        features = np.array([[0.0, 1e9], [0.0, -1e9]])
        with pytest.raises(DetectorError):
            maha_update(None, features, np.array([0, 0]))

    def test_feature_dim_change(self, rng):
        stats = maha_update(None, rng.normal(size=(10, 2)), np.zeros(10, dtype=int))
        with pytest.raises(DetectorError):
            maha_update(stats, rng.normal(size=(10, 3)), np.ones(10, dtype=int))


# --- kNN ---


class TestKnn:
    def test_query_in_index(self):
        index = FeatureIndex(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0, 1]))
        assert knn_score(index, np.array([3.0, 4.0]), 1)[0] == 0.0

    def test_two_neighbours(self):
        index = FeatureIndex(np.array([[0.0, 0.0], [0.0, 2.0]]), np.array([0, 0]))
        assert knn_score(index, np.array([0.0, 1.0]), 2)[0] == pytest.approx(1.0)

    def test_matches_full_sort(self, rng):
        index = FeatureIndex(rng.normal(size=(100, 3)), np.zeros(100, dtype=int))
        queries = rng.normal(size=(7, 3))
        brute = [np.sort(np.linalg.norm(index.features - q, axis=1))[:5].mean() for q in queries]
        np.testing.assert_allclose(knn_score(index, queries, 5), brute)

    def test_empty_index(self):
        with pytest.raises(DetectorError):
            knn_score(FeatureIndex(np.zeros((0, 2)), np.zeros(0, dtype=int)), np.zeros(2), 1)

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            knn_score(FeatureIndex(np.zeros((2, 2)), np.zeros(2, dtype=int)), np.zeros(2), 3)


# --- ViM ---


class TestVim:
    def test_basis_orthonormal(self, rng):
        features = rng.normal(size=(60, 6))
        state = vim_fit(features, rng.normal(size=(3, 6)), np.zeros(3))
        assert state.basis.shape == (6, 3)
        assert np.max(np.abs(state.basis.T @ state.basis - np.eye(3))) < 1e-8
        assert state.alpha >= 0

    def test_span_has_zero_residual(self, rng):
        span = rng.normal(size=(2, 4))
        features = rng.normal(size=(30, 2)) @ span + 1.5
        state = vim_fit(features, rng.normal(size=(2, 4)), np.zeros(2))
        np.testing.assert_allclose(vim_residual(state, features), 0.0, atol=1e-9)

    def test_outliers_have_larger_residual(self):
        rng = np.random.default_rng(4)
        scales = np.array([5.0, 4.0, 3.0, 0.2, 0.2, 0.1])
        ind = rng.normal(size=(400, 6)) * scales
        state = vim_fit(ind[:300], rng.normal(size=(3, 6)), np.zeros(3))
        held_out = vim_residual(state, ind[300:])
        far = vim_residual(state, rng.normal(size=(100, 6)) * 5.0)
        assert np.mean(held_out[:, None] < far[None, :]) >= 0.95

    def test_zero_residual_sets_unit_alpha(self, caplog):
        features = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]])
        state = vim_fit(features, np.ones((2, 2)), np.zeros(2))
        assert state.alpha == 1.0
        assert "residual is zero" in caplog.text


# --- SHE ---


class TestShe:
    def test_single_pattern(self):
        h = np.array([[1.0, 2.0]])
        patterns = she_fit(h, np.array([0]), np.array([0]))
        assert she_score(patterns, h, np.array([0]))[0] == pytest.approx(-5.0)

    def test_orthogonal_query(self):
        patterns = she_fit(np.array([[1.0, 0.0]]), np.array([0]), np.array([0]))
        assert she_score(patterns, np.array([[0.0, 3.0]]), np.array([0]))[0] == 0.0

    def test_incremental_equals_batch(self, rng):
        features = rng.normal(size=(60, 3))
        labels = np.tile([0, 1, 2], 20)
        preds = labels.copy()
        preds[[3, 24, 50]] = (preds[[3, 24, 50]] + 1) % 3
        chunks = [slice(0, 20), slice(20, 45), slice(45, 60)]
        patterns = None
        for chunk in chunks:
            patterns = she_fit(features[chunk], labels[chunk], preds[chunk], patterns)
        batch = she_fit(features, labels, preds)
        np.testing.assert_allclose(patterns.patterns, batch.patterns, atol=1e-9)
        np.testing.assert_array_equal(patterns.counts, batch.counts)

    def test_fallback_when_never_correct(self, caplog):
        patterns = she_fit(np.array([[2.0, 0.0], [4.0, 0.0]]), np.array([1, 1]), np.array([0, 0]))
        np.testing.assert_allclose(patterns.patterns[1], [3.0, 0.0])
        assert "no correctly classified" in caplog.text


# --- Thresholds ---


class TestThresholds:
    def test_boundary_inclusive(self):
        assert threshold_decide(1.5, 1.5)

    def test_infinite_thresholds(self, rng):
        scores = rng.normal(size=20)
        assert not threshold_decide(scores, math.inf).any()
        assert threshold_decide(scores, -math.inf).all()

    def test_retains_requested_share(self):
        scores = np.arange(1.0, 101.0)
        tau = threshold_fit(scores, 0.95)
        assert np.mean(~threshold_decide(scores, tau)) == pytest.approx(0.95)

    def test_nearest_rank_empty(self):
        with pytest.raises(DetectorError):
            nearest_rank(np.array([]), 50.0)


# --- Suite ---


class TestDetectorSuite:
    def test_calibrates_every_kind(self, learner, calib_task, rng):
        suite = DetectorSuite(list(DETECTOR_KINDS), CalibrationConfig(knn_k=3))
        suite.calibrate(learner, calib_task, task_number=1)
        x = rng.normal(size=(7, 3))
        for kind in DETECTOR_KINDS:
            scores = suite.score(kind, learner, x)
            assert scores.shape == (7,)
            assert np.all(np.isfinite(scores))
            assert kind in suite.thresholds
        states = suite.states()
        assert set(states) == set(DETECTOR_KINDS)
        assert all(s.orientation == "higher_is_ood" and s.task == 1 for s in states.values())

    def test_scoring_is_pure(self, learner, calib_task, rng):
        suite = DetectorSuite(["energy", "mahalanobis", "knn"], CalibrationConfig())
        suite.calibrate(learner, calib_task)
        x = rng.normal(size=(5, 3))
        for kind in suite.kinds:
            np.testing.assert_array_equal(suite.score(kind, learner, x), suite.score(kind, learner, x))

    @pytest.mark.parametrize(
        ("kind", "calibration"),
        [("react", {"react_percentile": 100.0}), ("dice", {"dice_keep": 1.0}), ("ash", {"ash_percentile": 0.0})],
    )
    def test_reductions_to_energy(self, learner, calib_task, rng, kind, calibration):
        suite = DetectorSuite([kind, "energy"], CalibrationConfig(**calibration))
        suite.calibrate(learner, calib_task)
        x = calib_task.inputs
        np.testing.assert_allclose(suite.score(kind, learner, x), suite.score("energy", learner, x), atol=1e-9)

    def test_knn_index_from_buffer(self, learner, calib_task, rng):
        buffer = ExemplarBuffer(capacity=6)
        buffer.entries = [Exemplar(rng.normal(size=3), i % 2) for i in range(6)]
        suite = DetectorSuite(["knn"], CalibrationConfig(knn_k=2))
        suite.calibrate(learner, calib_task, buffer)
        assert len(suite.index) == 6

    def test_rebuild_after_feature_growth(self, learner, calib_task):
        suite = DetectorSuite(["mahalanobis", "she"], CalibrationConfig())
        suite.calibrate(learner, calib_task)
        learner.params, learner.frozen_mask = dynamic_expand(learner.params, [5], np.random.default_rng(0))
        suite.calibrate(learner, calib_task)
        assert suite.maha.means.shape[1] == 11
        assert suite.she.patterns.shape[1] == 11

    def test_uncalibrated_detector(self, learner, rng):
        suite = DetectorSuite(["mahalanobis"], CalibrationConfig())
        with pytest.raises(DetectorError):
            suite.score("mahalanobis", learner, rng.normal(size=(2, 3)))

    def test_decide_uses_threshold(self, learner, calib_task):
        suite = DetectorSuite(["msp"], CalibrationConfig(threshold_retain=0.9))
        suite.calibrate(learner, calib_task)
        flagged = suite.decide("msp", learner, calib_task.inputs)
        assert np.mean(~flagged) >= 0.9
