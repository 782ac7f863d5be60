"""Continual-learning and OOD-detection metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from cloodbench.errors import ConfigError

AccuracyMatrix = list[list[float]]  # row i (0-based) holds accuracies on tasks 0..i after task i


def _row(matrix: AccuracyMatrix, t: int) -> list[float]:
    if not 1 <= t <= len(matrix):
        raise ConfigError(f"row {t} is not filled (matrix has {len(matrix)} rows)")
    row = matrix[t - 1]
    if len(row) != t:
        raise ConfigError(f"row {t} must hold {t} entries, found {len(row)}")
    return row


def aca(matrix: AccuracyMatrix, t: int) -> float:
    """Average classification accuracy over tasks 1..t after training task t (1-based)."""
    return float(np.mean(_row(matrix, t)))


def aia(matrix: AccuracyMatrix) -> float:
    return float(np.mean([aca(matrix, t) for t in range(1, len(matrix) + 1)]))


def af(matrix: AccuracyMatrix) -> float | None:
    """Average forgetting: best earlier accuracy minus final accuracy, unclamped. None for one task."""
    T = len(matrix)
    if T < 2:
        return None
    final = _row(matrix, T)
    drops = [max(matrix[t][j] for t in range(j, T - 1)) - final[j] for j in range(T - 1)]
    return float(np.mean(drops))


def _check(ind: np.ndarray, ood: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    ind = np.asarray(ind, dtype=float).ravel()
    ood = np.asarray(ood, dtype=float).ravel()
    if ind.size == 0 or ood.size == 0:
        return None
    if not (np.all(np.isfinite(ind)) and np.all(np.isfinite(ood))):
        raise ConfigError("OOD scores must be finite")
    return ind, ood


def auroc(ind: np.ndarray, ood: np.ndarray) -> float | None:
    """P(ood > ind) + 0.5 P(ood = ind), with OOD as the positive class.

    Mann-Whitney U over average ranks; None when either side is empty.
    """
    checked = _check(ind, ood)
    if checked is None:
        return None
    ind, ood = checked
    ranks = rankdata(np.concatenate([ood, ind]))
    m, n = ood.size, ind.size
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


def fpr_at_tpr(ind: np.ndarray, ood: np.ndarray, tpr_target: float = 0.95) -> float | None:
    """Fraction of IND scores >= the largest threshold that flags tpr_target of the OOD scores."""
    checked = _check(ind, ood)
    if checked is None:
        return None
    ind, ood = checked
    needed = max(1, math.ceil(tpr_target * ood.size - 1e-9))
    threshold = np.sort(ood)[::-1][needed - 1]
    return float(np.mean(ind >= threshold))


def aupr(ind: np.ndarray, ood: np.ndarray) -> float | None:
    """Average precision with OOD positive; tied scores enter as one threshold step."""
    checked = _check(ind, ood)
    if checked is None:
        return None
    ind, ood = checked
    scores = np.concatenate([ood, ind])
    positive = np.concatenate([np.ones(ood.size), np.zeros(ind.size)])
    thresholds = np.unique(scores)[::-1]
    ap, prev_recall = 0.0, 0.0
    for tau in thresholds:
        flagged = scores >= tau
        tp = positive[flagged].sum()
        recall = tp / ood.size
        precision = tp / flagged.sum()
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)
