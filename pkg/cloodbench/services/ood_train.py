"""Training-time OOD adaptations that compose with any CL strategy."""

from __future__ import annotations

import logging

import numpy as np

from cloodbench.models.experiment import OodTrainConfig
from cloodbench.services.datastream import OutlierSet
from cloodbench.services.losses import LogitTransform, LossTerm
from cloodbench.services.network import LOG_FLOOR, ParamSet, forward

logger = logging.getLogger(__name__)

LOGITNORM_EPS = 1e-7
LOGITNORM_GRAD_FLOOR = 1.0


def logitnorm_transform(logits: np.ndarray, tau: float) -> np.ndarray:
    """z / (tau * (||z|| + 1e-7)), row-wise."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=float)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / (tau * (norms + LOGITNORM_EPS))


class LogitNorm:
    """LogitNorm as a differentiable logit transform used inside the training loss only."""

    def __init__(self, tau: float) -> None:
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.tau = tau

    def forward(self, logits: np.ndarray) -> np.ndarray:
        return logitnorm_transform(logits, self.tau)

    def backward(self, logits: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Exact Jacobian-vector product where ||z|| >= LOGITNORM_GRAD_FLOOR.

        Below the floor the transform is treated as the linear map
        z / (tau * floor), which bounds the gain at 1 / (tau * floor) on
        freshly expanded zero heads.
        """
        norms = np.linalg.norm(logits, axis=-1, keepdims=True)
        exact = norms >= LOGITNORM_GRAD_FLOOR
        s = self.tau * (np.maximum(norms, LOGITNORM_GRAD_FLOOR) + LOGITNORM_EPS)
        denom = norms * (norms + LOGITNORM_EPS)
        proj = np.sum(logits * grad, axis=-1, keepdims=True)
        radial = np.divide(logits * proj, denom, out=np.zeros_like(logits), where=exact & (denom > 0))
        return (grad - radial) / s


def oe_loss(probs: np.ndarray) -> float:
    """Batch mean of the cross-entropy from the uniform distribution to ``probs``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    if probs.size == 0:
        return 0.0
    return float(np.mean(-np.mean(np.log(np.maximum(probs, LOG_FLOOR)), axis=1)))


def oe_grad(probs: np.ndarray) -> np.ndarray:
    """dL/dz of ``oe_loss`` with respect to the logits that produced ``probs``."""
    m, k = probs.shape
    return (probs - 1.0 / k) / m


def mix_augment(
    x: np.ndarray,
    source: np.ndarray,
    strength: float,
    chain_len: int,
    rng: np.random.Generator,
    data_range: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Chain of seeded elementary perturbations, then a convex mix with ``source``.

    Elementary operations: additive Gaussian noise, a swap of two coordinates,
    and a global rescale. Rows of ``x`` pair with rows of ``source``.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"mix strength must lie in [0, 1], got {strength}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if strength == 0.0 and chain_len == 0:
        return x.copy()

    out = x.copy()
    n, dim = out.shape
    for _ in range(chain_len):
        ops = rng.integers(0, 3, size=n)
        noise = rng.normal(0.0, 0.1, size=out.shape)
        pairs = rng.integers(0, dim, size=(n, 2))
        factors = rng.uniform(0.8, 1.2, size=n)
        for i in range(n):
            if ops[i] == 0:
                out[i] = out[i] + noise[i]
            elif ops[i] == 1:
                a, b = pairs[i]
                out[i, [a, b]] = out[i, [b, a]]
            else:
                out[i] = out[i] * factors[i]

    mixed = (1.0 - strength) * out + strength * np.atleast_2d(source)
    if data_range is not None:
        mixed = np.clip(mixed, data_range[0], data_range[1])
    return mixed


class OodObjective:
    """The configured training-time OOD adaptation, wired into the trainer's hook points.

    - logitnorm: exposes ``transform`` so every CL loss is computed on normalized logits
    - mix: ``augment`` perturbs current and replayed inputs
    - oe: ``loss_terms`` adds lambda * L_OE on a fresh outlier batch per step
    """

    def __init__(
        self,
        cfg: OodTrainConfig,
        *,
        batch_size: int,
        outliers: OutlierSet | None = None,
        mixing_source: np.ndarray | None = None,
        data_range: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> None:
        self.kind = cfg.kind
        self.cfg = cfg
        self.outliers = outliers
        self.data_range = data_range
        self.outlier_batch = cfg.outlier_batch or batch_size
        self.transform: LogitTransform | None = LogitNorm(cfg.tau) if cfg.kind == "logitnorm" else None

        self.mixing_source = mixing_source
        if mixing_source is not None and data_range is not None:
            lo, hi = data_range
            self.mixing_source = lo + (mixing_source + 1.0) / 2.0 * (hi - lo)

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def augment(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind != "mix" or self.mixing_source is None or len(x) == 0:
            return x
        picks = rng.integers(0, len(self.mixing_source), size=len(x))
        return mix_augment(
            x,
            self.mixing_source[picks],
            self.cfg.mix_strength,
            self.cfg.mix_chain_len,
            rng,
            self.data_range,
        )

    def loss_terms(self, params: ParamSet, rng: np.random.Generator) -> list[LossTerm]:
        if self.kind != "oe" or self.cfg.lambda_ == 0.0:
            return []
        if self.outliers is None or len(self.outliers) == 0 or params.num_classes < 2:
            return []
        idx = rng.choice(len(self.outliers), size=min(self.outlier_batch, len(self.outliers)), replace=False)
        record = forward(params, self.outliers.inputs[idx])
        lam = self.cfg.lambda_
        return [LossTerm("oe", lam * oe_loss(record.probs), record, lam * oe_grad(record.probs))]
