"""Loss terms assembled by strategies and training-time OOD objectives.

A LossTerm carries its value and dL/dlogits for one forward pass; the
trainer backpropagates and sums them. Terms that act directly on the
parameters (quadratic penalties) carry ``param_grads`` instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from cloodbench.services.network import (
    LOG_FLOOR,
    ForwardRecord,
    ParamSet,
    cross_entropy,
    cross_entropy_grad,
    softmax,
)

logger = logging.getLogger(__name__)


class LogitTransform(Protocol):
    def forward(self, logits: np.ndarray) -> np.ndarray: ...

    def backward(self, logits: np.ndarray, grad: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class LossTerm:
    name: str
    value: float
    record: ForwardRecord | None = None
    grad_logits: np.ndarray | None = None
    param_grads: ParamSet | None = None
    head_only: bool = False


def replay_loss(current_loss: float, buffer_loss: float, alpha: float) -> float:
    """Convex combination alpha*L_current + (1-alpha)*L_buffer."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * current_loss + (1.0 - alpha) * buffer_loss


def scaled(term: LossTerm, weight: float) -> LossTerm:
    if weight == 1.0:
        return term
    grad = None if term.grad_logits is None else term.grad_logits * weight
    return replace(term, value=term.value * weight, grad_logits=grad)


def replay_terms(current: LossTerm, replayed: LossTerm, alpha: float) -> list[LossTerm]:
    """Split ``replay_loss`` into its two weighted terms, one per forward pass."""
    total = replay_loss(current.value, replayed.value, alpha)
    logger.debug("Replay batch loss %.4f (alpha=%.2f)", total, alpha)
    return [scaled(current, alpha), scaled(replayed, 1.0 - alpha)]


def ce_term(
    name: str,
    record: ForwardRecord,
    labels: np.ndarray,
    weight: float = 1.0,
    transform: LogitTransform | None = None,
    head_only: bool = False,
) -> LossTerm:
    """Batch-mean cross-entropy, optionally over transformed logits."""
    if transform is None:
        probs = record.probs
    else:
        probs = softmax(transform.forward(record.logits))
    value = float(np.mean(cross_entropy(probs, labels)))
    grad = cross_entropy_grad(probs, labels)
    if transform is not None:
        grad = transform.backward(record.logits, grad)
    if weight != 1.0:
        value *= weight
        grad = grad * weight
    return LossTerm(name, value, record, grad, head_only=head_only)


def distillation_loss(student_probs: np.ndarray, teacher_probs: np.ndarray) -> float:
    """KL(student || teacher), batch-averaged; teacher zeros are floored at 1e-12."""
    p = np.atleast_2d(np.asarray(student_probs, dtype=float))
    q = np.atleast_2d(np.asarray(teacher_probs, dtype=float))
    if np.any((q < LOG_FLOOR) & (p > 0)):
        logger.warning("Distillation clamped teacher probabilities at the log floor")
    q = np.maximum(q, LOG_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(q)), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def kd_term(
    name: str,
    record: ForwardRecord,
    teacher_logits: np.ndarray,
    old_classes: int,
    weight: float,
    temperature: float,
    transform: LogitTransform | None = None,
) -> LossTerm:
    """Distillation over the first ``old_classes`` logits at ``temperature``."""
    student = record.logits if transform is None else transform.forward(record.logits)
    teacher = teacher_logits if transform is None else transform.forward(teacher_logits)
    p = softmax(student[:, :old_classes] / temperature)
    q = np.maximum(softmax(teacher[:, :old_classes] / temperature), LOG_FLOOR)
    value = distillation_loss(p, q)

    log_ratio = np.log(np.maximum(p, LOG_FLOOR)) - np.log(q)
    kl = np.sum(p * log_ratio, axis=1, keepdims=True)
    grad_old = p * (log_ratio - kl) / temperature / len(p)
    grad = np.zeros_like(record.logits)
    grad[:, :old_classes] = grad_old
    if transform is not None:
        grad = transform.backward(record.logits, grad)
    return LossTerm(name, weight * value, record, weight * grad)
