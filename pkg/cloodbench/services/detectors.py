"""Post-hoc OOD detectors.

All scores are oriented so that larger means more likely out-of-distribution.
Output-based detectors read logits; distance-based detectors read features h(x).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TypeVar

import numpy as np
from scipy.special import logsumexp
from scipy.spatial.distance import cdist

from cloodbench.errors import ConfigError, DetectorError
from cloodbench.models.detector_state import DetectorState
from cloodbench.models.experiment import CalibrationConfig
from cloodbench.services.datastream import Dataset
from cloodbench.services.memory import ExemplarBuffer
from cloodbench.services.network import backward, forward, softmax
from cloodbench.services.strategies import Learner, bic_apply

logger = logging.getLogger(__name__)

T = TypeVar("T")

RIDGE = 1e-6
TEMPERATURE_GRID = np.arange(50, 1001, 5) / 100.0  # 0.5 .. 10.0 step 0.05


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value (rank at least 1)."""
    flat = np.sort(np.ravel(values))
    if flat.size == 0:
        raise DetectorError("percentile of an empty set")
    rank = max(1, math.ceil(percentile / 100.0 * flat.size))
    return float(flat[min(rank, flat.size) - 1])


# --- output scores -------------------------------------------------------------


def score_basic(kind: str, logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    if kind == "msp":
        return -softmax(z).max(axis=1)
    if kind == "maxlogit":
        return -z.max(axis=1)
    if kind == "energy":
        return -temperature * logsumexp(z / temperature, axis=1)
    if kind == "entropy":
        p = softmax(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return -plogp.sum(axis=1)
    raise ConfigError(f"unknown basic score {kind!r}")


def odin_score(learner: Learner, x: np.ndarray, temperature: float, epsilon: float) -> np.ndarray:
    """Temperature-scaled MSP after a signed input step that raises the top-class score."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if epsilon > 0.0:
        record = forward(learner.params, x)
        logits = bic_apply(record.logits, learner.bic)
        p = softmax(logits / temperature)
        onehot = np.zeros_like(p)
        onehot[np.arange(len(p)), np.argmax(logits, axis=1)] = 1.0
        grad_logits = (p - onehot) / temperature * learner.logit_scale()
        _, grad_x = backward(learner.params, record, grad_logits, need_input_grad=True)
        assert grad_x is not None
        x = x - epsilon * np.sign(grad_x)
    _, logits = learner.infer(x)
    return -softmax(logits / temperature).max(axis=1)


def react_fit(features: np.ndarray, percentile: float) -> float:
    return nearest_rank(features, percentile)


def react_apply(features: np.ndarray, threshold: float) -> np.ndarray:
    return np.minimum(features, threshold)


def dice_fit(head_weight: np.ndarray, mean_features: np.ndarray, keep: float) -> np.ndarray:
    """Binary mask keeping, per output unit, the top ceil(keep*F) weight contributions."""
    if not 0.0 <= keep <= 1.0:
        raise ConfigError(f"DICE keep fraction must lie in [0, 1], got {keep}")
    k, f = head_weight.shape
    n_keep = math.ceil(keep * f)
    mask = np.zeros((k, f), dtype=int)
    contrib = head_weight * mean_features
    for i in range(k):
        top = np.argsort(-contrib[i], kind="stable")[:n_keep]
        mask[i, top] = 1
    return mask


def dice_logits(features: np.ndarray, head_weight: np.ndarray, head_bias: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return features @ (mask * head_weight).T + head_bias


def ash_apply(features: np.ndarray, percentile: float, mode: str = "prune") -> np.ndarray:
    """Activation shaping per sample.

    prune: zero everything except the top F - round(F*p/100) activations.
    scale: multiply all activations by exp(s1/s2), s1 the total and s2 the
    sum of the surviving top activations.
    """
    if not 0.0 <= percentile < 100.0:
        raise ConfigError(f"ASH percentile must lie in [0, 100), got {percentile}")
    h = np.atleast_2d(np.asarray(features, dtype=float))
    f = h.shape[1]
    n_keep = f - int(round(f * percentile / 100.0))
    order = np.argsort(-h, axis=1, kind="stable")
    keep = np.zeros_like(h, dtype=bool)
    np.put_along_axis(keep, order[:, :n_keep], True, axis=1)
    if mode == "prune":
        return np.where(keep, h, 0.0)
    if mode == "scale":
        s1 = h.sum(axis=1, keepdims=True)
        s2 = np.where(keep, h, 0.0).sum(axis=1, keepdims=True)
        ratio = np.divide(s1, s2, out=np.zeros_like(s1), where=s2 != 0)
        return h * np.exp(ratio)
    raise ConfigError(f"unknown ASH mode {mode!r}")


def temp_fit(logits: np.ndarray, labels: np.ndarray) -> float:
    """Grid search over T in [0.5, 10] (step 0.05) for the lowest mean NLL; ties pick the smaller T."""
    if len(labels) == 0:
        raise DetectorError("temperature fit needs a nonempty validation set")
    rows = np.arange(len(labels))
    best_t, best_nll = float(TEMPERATURE_GRID[0]), np.inf
    for t in TEMPERATURE_GRID:
        z = logits / t
        nll = float(np.mean(logsumexp(z, axis=1) - z[rows, labels]))
        if nll < best_nll - 1e-15:
            best_t, best_nll = float(t), nll
    return best_t


# --- feature-space statistics --------------------------------------------------


@dataclass
class GaussianStats:
    """Per-class means with a shared within-class covariance.

    ``scatter`` is the pooled within-class scatter sum; Sigma = scatter / total.
    """

    means: np.ndarray  # [K, F]
    counts: np.ndarray  # [K]
    scatter: np.ndarray  # [F, F]
    total: int
    inverse: np.ndarray | None = None

    @property
    def covariance(self) -> np.ndarray:
        return self.scatter / max(self.total, 1)

    @property
    def present(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)


def _refresh_inverse(stats: GaussianStats) -> GaussianStats:
    regularized = stats.covariance + RIDGE * np.eye(stats.scatter.shape[0])
    cond = float(np.linalg.cond(regularized))
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise DetectorError(f"shared covariance is singular even with ridge {RIDGE} (condition number {cond:.3e})")
    stats.inverse = np.linalg.inv(regularized)
    return stats


def maha_update(stats: GaussianStats | None, features: np.ndarray, labels: np.ndarray) -> GaussianStats:
    """Fold a task's class statistics into ``stats`` by Chan's pairwise merge.

    Means of classes absent from ``labels`` are left untouched.
    """
    f = features.shape[1]
    k = int(labels.max()) + 1 if len(labels) else 0
    if stats is None:
        stats = GaussianStats(np.zeros((0, f)), np.zeros(0, dtype=int), np.zeros((f, f)), 0)
    if stats.means.shape[1] != f:
        raise DetectorError(f"feature dim changed from {stats.means.shape[1]} to {f}; rebuild the statistics")

    k = max(k, len(stats.counts))
    means = np.zeros((k, f))
    counts = np.zeros(k, dtype=int)
    means[: len(stats.counts)] = stats.means
    counts[: len(stats.counts)] = stats.counts
    scatter = stats.scatter.copy()

    for c in np.unique(labels):
        rows = features[labels == c]
        n_b = len(rows)
        mu_b = rows.mean(axis=0)
        centered = rows - mu_b
        scatter += centered.T @ centered
        n_a = counts[c]
        if n_a:
            delta = mu_b - means[c]
            scatter += np.outer(delta, delta) * (n_a * n_b / (n_a + n_b))
            means[c] = means[c] + delta * n_b / (n_a + n_b)
        else:
            means[c] = mu_b
        counts[c] = n_a + n_b

    return _refresh_inverse(GaussianStats(means, counts, scatter, stats.total + len(labels)))


def maha_score(stats: GaussianStats, features: np.ndarray) -> np.ndarray:
    """Smallest Mahalanobis distance to any present class mean."""
    present = stats.present
    if len(present) == 0:
        raise DetectorError("Mahalanobis scoring needs at least one class")
    if stats.inverse is None:
        _refresh_inverse(stats)
    h = np.atleast_2d(features)
    best = np.full(len(h), np.inf)
    for c in present:
        d = h - stats.means[c]
        best = np.minimum(best, np.einsum("ij,jk,ik->i", d, stats.inverse, d))
    return best


@dataclass(frozen=True, eq=False)
class FeatureIndex:
    features: np.ndarray  # [n, F]
    labels: np.ndarray  # [n]

    def __len__(self) -> int:
        return len(self.features)


def knn_score(index: FeatureIndex, features: np.ndarray, k: int) -> np.ndarray:
    """Mean Euclidean distance to the k nearest stored features."""
    if len(index) == 0:
        raise DetectorError("kNN index is empty")
    if k > len(index):
        raise ConfigError(f"k={k} exceeds the index size {len(index)}")
    dist = cdist(np.atleast_2d(features), index.features)
    return np.sort(dist, axis=1)[:, :k].mean(axis=1)


@dataclass(frozen=True, eq=False)
class VimState:
    basis: np.ndarray  # R [F, d], orthonormal columns
    alpha: float
    offset: np.ndarray  # u [F]


def _residual(state: VimState, features: np.ndarray) -> np.ndarray:
    centered = np.atleast_2d(features) - state.offset
    return np.linalg.norm(centered - centered @ state.basis @ state.basis.T, axis=1)


def vim_fit(features: np.ndarray, head_weight: np.ndarray, head_bias: np.ndarray) -> VimState:
    """Principal subspace of centered features plus the virtual-logit scale."""
    n, f = features.shape
    if n < f:
        logger.warning("ViM fit on %d samples for %d features; subspace is underdetermined", n, f)
    u = features.mean(axis=0)
    centered = features - u
    _, vecs = np.linalg.eigh(centered.T @ centered)
    d = max(1, f // 2)
    basis = vecs[:, ::-1][:, :d]
    partial = VimState(basis, 1.0, u)
    total_residual = float(_residual(partial, features).sum())
    max_logits = (features @ head_weight.T + head_bias).max(axis=1) if head_weight.shape[0] else np.zeros(n)
    if total_residual <= 0.0:
        logger.warning("ViM calibration residual is zero; virtual-logit scale set to 1")
        return partial
    return VimState(basis, max(0.0, float(max_logits.sum()) / total_residual), u)


def vim_residual(state: VimState, features: np.ndarray) -> np.ndarray:
    return _residual(state, features)


def vim_score(state: VimState, features: np.ndarray, logits: np.ndarray) -> np.ndarray:
    return state.alpha * _residual(state, features) - logsumexp(np.atleast_2d(logits), axis=1)


@dataclass(frozen=True, eq=False)
class ShePatterns:
    patterns: np.ndarray  # [K, F]
    counts: np.ndarray  # [K]


def she_fit(
    features: np.ndarray,
    labels: np.ndarray,
    predictions: np.ndarray,
    previous: ShePatterns | None = None,
) -> ShePatterns:
    """Mean feature of correctly classified samples per class, merged by count into ``previous``."""
    f = features.shape[1]
    k = max(int(labels.max()) + 1 if len(labels) else 0, 0 if previous is None else len(previous.counts))
    patterns = np.zeros((k, f))
    counts = np.zeros(k, dtype=int)
    if previous is not None:
        patterns[: len(previous.counts)] = previous.patterns
        counts[: len(previous.counts)] = previous.counts

    for c in np.unique(labels):
        in_class = labels == c
        rows = in_class & (predictions == c)
        if not rows.any():
            logger.warning("SHE: class %d has no correctly classified sample; using all its samples", int(c))
            rows = in_class
        n_b = int(rows.sum())
        mu_b = features[rows].mean(axis=0)
        n_a = counts[c]
        patterns[c] = (n_a * patterns[c] + n_b * mu_b) / (n_a + n_b)
        counts[c] = n_a + n_b
    return ShePatterns(patterns, counts)


def she_score(patterns: ShePatterns, features: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(features)
    stored = np.zeros_like(h)
    known = predicted < len(patterns.counts)
    stored[known] = patterns.patterns[predicted[known]]
    return -np.sum(h * stored, axis=1)


# --- thresholds ------------------------------------------------------------------


def threshold_fit(ind_scores: np.ndarray, retain: float = 0.95) -> float:
    """Smallest threshold above the nearest-rank ``retain`` quantile of IND scores."""
    return float(np.nextafter(nearest_rank(ind_scores, retain * 100.0), np.inf))


def threshold_decide(scores: np.ndarray | float, tau: float) -> np.ndarray:
    """True marks OOD: score >= tau."""
    return np.asarray(scores) >= tau


# --- suite ------------------------------------------------------------------------


class DetectorSuite:
    """Calibrated detectors of one repetition.

    ``calibrate`` runs at task boundaries; scoring afterwards is pure.
    """

    def __init__(self, kinds: list[str], cfg: CalibrationConfig) -> None:
        self.kinds = list(kinds)
        self.cfg = cfg
        self.task = 0
        self.thresholds: dict[str, float] = {}
        self.temperature = 1.0
        self.react_threshold: float | None = None
        self.dice_mask: np.ndarray | None = None
        self.dice_mean: np.ndarray | None = None
        self.maha: GaussianStats | None = None
        self.index: FeatureIndex | None = None
        self.vim: VimState | None = None
        self.she: ShePatterns | None = None

    def calibrate(self, learner: Learner, task: Dataset, buffer: ExemplarBuffer | None = None, task_number: int = 0) -> None:
        self.task = task_number
        features, logits = learner.infer(task.inputs)
        kinds = set(self.kinds)
        refresh = self.cfg.refresh_from_buffer and buffer is not None and len(buffer) > 0

        if "tempscale" in kinds:
            self.temperature = temp_fit(logits, task.labels)
        if "react" in kinds:
            self.react_threshold = react_fit(features, self.cfg.react_percentile)
        if "dice" in kinds:
            self.dice_mean = features.mean(axis=0)
            self.dice_mask = dice_fit(learner.params.head_weight, self.dice_mean, self.cfg.dice_keep)
        if "vim" in kinds:
            self.vim = vim_fit(features, learner.params.head_weight, learner.params.head_bias)
        if "knn" in kinds:
            if buffer is not None and len(buffer) > 0:
                self.index = FeatureIndex(self._buffer_features(learner, buffer), buffer.labels)
            else:
                self.index = FeatureIndex(features, task.labels.copy())

        if "mahalanobis" in kinds or "she" in kinds:
            stat_feats, stat_labels = features, task.labels
            stale = self.maha is not None and self.maha.means.shape[1] != features.shape[1]
            stale = stale or (self.she is not None and self.she.patterns.shape[1] != features.shape[1])
            if refresh or stale:
                if stale:
                    logger.info("Feature dim changed; rebuilding distance statistics from scratch")
                self.maha, self.she = None, None
                if buffer is not None and len(buffer) > 0:
                    old = ~np.isin(buffer.labels, task.labels)
                    stat_feats = np.vstack([self._buffer_features(learner, buffer)[old], features])
                    stat_labels = np.concatenate([buffer.labels[old], task.labels])
            if "mahalanobis" in kinds:
                self.maha = maha_update(self.maha, stat_feats, stat_labels)
            if "she" in kinds:
                stat_logits = learner.head(stat_feats)
                self.she = she_fit(stat_feats, stat_labels, np.argmax(stat_logits, axis=1), self.she)

        for kind in self.kinds:
            self.thresholds[kind] = threshold_fit(self.score(kind, learner, task.inputs), self.cfg.threshold_retain)
        logger.info("Calibrated %d detector(s) on %d samples", len(self.kinds), len(task))

    @staticmethod
    def _buffer_features(learner: Learner, buffer: ExemplarBuffer) -> np.ndarray:
        if buffer.mode == "feature":
            return buffer.inputs
        return forward(learner.params, buffer.inputs).features

    def score(self, kind: str, learner: Learner, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if kind == "odin":
            return odin_score(learner, x, cfg.odin_temperature, cfg.odin_epsilon)
        features, logits = learner.infer(x)
        if kind in ("msp", "maxlogit", "entropy"):
            return score_basic(kind, logits)
        if kind == "energy":
            return score_basic("energy", logits, cfg.energy_temperature)
        if kind == "tempscale":
            return score_basic("msp", logits / self.temperature)
        if kind == "react":
            return score_basic("energy", learner.head(react_apply(features, self._require(self.react_threshold, kind))))
        if kind == "dice":
            mask = self._require(self.dice_mask, kind)
            raw = dice_logits(features, learner.params.head_weight, learner.params.head_bias, mask)
            return score_basic("energy", bic_apply(raw, learner.bic))
        if kind in ("ash", "scale"):
            mode = "prune" if kind == "ash" else "scale"
            return score_basic("energy", learner.head(ash_apply(features, cfg.ash_percentile, mode)))
        if kind == "mahalanobis":
            return maha_score(self._require(self.maha, kind), features)
        if kind == "knn":
            index = self._require(self.index, kind)
            return knn_score(index, features, min(cfg.knn_k, len(index)))
        if kind == "vim":
            return vim_score(self._require(self.vim, kind), features, logits)
        if kind == "she":
            return she_score(self._require(self.she, kind), features, np.argmax(logits, axis=1))
        raise ConfigError(f"unknown detector kind {kind!r}")

    @staticmethod
    def _require(value: T | None, kind: str) -> T:
        if value is None:
            raise DetectorError(f"detector {kind!r} used before calibration")
        return value

    def decide(self, kind: str, learner: Learner, x: np.ndarray) -> np.ndarray:
        return threshold_decide(self.score(kind, learner, x), self.thresholds[kind])

    def states(self) -> dict[str, DetectorState]:
        out: dict[str, DetectorState] = {}
        for kind in self.kinds:
            state = DetectorState(kind=kind, task=self.task, threshold=self.thresholds.get(kind))
            if kind == "energy":
                state.temperature = self.cfg.energy_temperature
            elif kind == "tempscale":
                state.temperature = self.temperature
            elif kind == "odin":
                state.temperature = self.cfg.odin_temperature
                state.odin_epsilon = self.cfg.odin_epsilon
            elif kind == "react":
                state.react_threshold = self.react_threshold
            elif kind == "dice" and self.dice_mask is not None and self.dice_mean is not None:
                state.dice_mask = self.dice_mask.tolist()
                state.dice_mean_features = self.dice_mean.tolist()
            elif kind in ("ash", "scale"):
                state.ash_percentile = self.cfg.ash_percentile
            elif kind == "mahalanobis" and self.maha is not None:
                state.class_means = self.maha.means.tolist()
                state.class_counts = self.maha.counts.tolist()
                state.covariance = self.maha.covariance.tolist()
            elif kind == "knn" and self.index is not None:
                state.index_size = len(self.index)
                state.knn_k = self.cfg.knn_k
            elif kind == "vim" and self.vim is not None:
                state.vim_alpha = self.vim.alpha
                state.vim_dim = self.vim.basis.shape[1]
            elif kind == "she" and self.she is not None:
                state.patterns = self.she.patterns.tolist()
                state.class_counts = self.she.counts.tolist()
            out[kind] = state
        return out
