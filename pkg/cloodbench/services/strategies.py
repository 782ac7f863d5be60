"""Continual-learning strategies as training-loop hook bundles.

Every strategy implements four hooks the trainer calls in a fixed order:
``before_task`` (returns the data to train on), ``assemble_loss`` (loss terms
for one mini-batch), ``after_backward`` (gradient surgery) and
``after_task`` (buffer, importance and teacher bookkeeping).
"""

from __future__ import annotations

import copy
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from cloodbench.errors import ConfigError
from cloodbench.models.experiment import ExperimentConfig
from cloodbench.services.datastream import Dataset, TaskStream
from cloodbench.services.losses import LogitTransform, LossTerm, ce_term, kd_term, replay_terms
from cloodbench.services.memory import (
    Exemplar,
    ExemplarBuffer,
    PrototypeSet,
    as_dataset,
    class_balanced_update,
    recompute_from_buffer,
    reservoir_update,
    sample,
)
from cloodbench.services.network import (
    ForwardRecord,
    Layer,
    OptimizerState,
    ParamSet,
    add,
    backward,
    cross_entropy_grad,
    extract_features,
    flatten,
    forward,
    head_logits,
    init_branch,
    resize_like,
    softmax,
    unflatten,
    zeros_like,
)
from cloodbench.services.seeding import make_rng

logger = logging.getLogger(__name__)


# --- model wrapper -----------------------------------------------------------


@dataclass
class BiCLayer:
    """Per-task (start, end, alpha, beta) stages partitioning the seen classes.

    Only the newest stage carries a fitted correction; earlier stages are held
    at the identity (1, 0), so applying every stage equals applying the newest.
    """

    stages: list[tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def newest(self) -> tuple[int, int, float, float] | None:
        return self.stages[-1] if self.stages else None

    def add_stage(self, start: int, end: int, alpha: float = 1.0, beta: float = 0.0) -> None:
        covered = self.stages[-1][1] if self.stages else 0
        if start != covered or end <= start:
            raise ConfigError(f"BiC stage [{start}, {end}) does not continue coverage at {covered}")
        self.stages = [(s, e, 1.0, 0.0) for s, e, _, _ in self.stages]
        self.stages.append((start, end, alpha, beta))


def bic_apply(logits: np.ndarray, layer: BiCLayer | None) -> np.ndarray:
    """z' = alpha*z + beta on the newest stage's logits; older logits pass through."""
    if layer is None or layer.newest is None:
        return logits
    start, end, alpha, beta = layer.newest
    out = np.array(logits, dtype=float, copy=True)
    out[..., start:end] = alpha * out[..., start:end] + beta
    return out


def bic_fit(
    logits: np.ndarray,
    labels: np.ndarray,
    new_range: tuple[int, int],
    fit_scale: bool = True,
) -> tuple[float, float]:
    """Fit (alpha, beta) for the new-stage logits by minimizing CE with the network frozen.

    Returns the identity (1, 0) when the held-out set lacks old or new classes.
    """
    start, end = new_range
    is_new = (labels >= start) & (labels < end)
    if not is_new.any() or is_new.all():
        logger.warning("BiC fit skipped: held-out set lacks %s-class samples", "new" if not is_new.any() else "old")
        return 1.0, 0.0

    n = len(labels)
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    z_new = logits[:, start:end]

    def _objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        alpha, beta = (theta[0], theta[1]) if fit_scale else (1.0, theta[0])
        z = logits.copy()
        z[:, start:end] = alpha * z_new + beta
        p = softmax(z)
        loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-12))))
        g = (p - onehot)[:, start:end] / n
        grad_beta = g.sum()
        if fit_scale:
            return loss, np.array([np.sum(g * z_new), grad_beta])
        return loss, np.array([grad_beta])

    x0 = np.array([1.0, 0.0]) if fit_scale else np.array([0.0])
    result = minimize(_objective, x0, jac=True, method="L-BFGS-B")
    if fit_scale:
        return float(result.x[0]), float(result.x[1])
    return 1.0, float(result.x[0])


def ncm_predict(prototypes: PrototypeSet, features: np.ndarray) -> np.ndarray:
    """Nearest-class-mean labels; absent classes never win, ties go to the lowest index."""
    present = prototypes.present
    if len(present) == 0:
        raise ConfigError("NCM prediction needs at least one prototype")
    feats = np.atleast_2d(features)
    dist = np.linalg.norm(feats[:, None, :] - prototypes.means[present][None, :, :], axis=2)
    return present[np.argmin(dist, axis=1)]


@dataclass
class Learner:
    """Trainable state of one repetition: parameters plus inference-time adjusters."""

    params: ParamSet
    optimizer: OptimizerState
    frozen_mask: ParamSet | None = None
    bic: BiCLayer | None = None
    prototypes: PrototypeSet | None = None
    use_ncm: bool = False

    def head(self, features: np.ndarray) -> np.ndarray:
        return bic_apply(head_logits(features, self.params.head_weight, self.params.head_bias), self.bic)

    def logit_scale(self) -> np.ndarray:
        """d z'/d z per class for the active BiC stage (ones without one)."""
        return bic_apply(np.ones(self.params.num_classes), self.bic) - bic_apply(
            np.zeros(self.params.num_classes), self.bic
        )

    def infer(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(features, logits) for evaluation; logits include the BiC correction."""
        record = forward(self.params, x)
        return record.features, bic_apply(record.logits, self.bic)

    def predict(self, x: np.ndarray) -> np.ndarray:
        features, logits = self.infer(x)
        if self.use_ncm and self.prototypes is not None and len(self.prototypes.present):
            return ncm_predict(self.prototypes, features)
        return np.argmax(logits, axis=1)


# --- regularization and projection primitives --------------------------------


@dataclass(frozen=True, eq=False)
class ImportanceMap:
    omega: ParamSet
    anchor: ParamSet

    def resized(self, like: ParamSet) -> ImportanceMap:
        return ImportanceMap(resize_like(self.omega, like), resize_like(self.anchor, like))


def ewc_penalty(params: ParamSet, importance: ImportanceMap) -> float:
    """sum_k Omega_k (theta_k - theta*_k)^2."""
    total = 0.0
    for theta, omega, anchor in zip(
        params.arrays(), importance.omega.arrays(), importance.anchor.arrays(), strict=True
    ):
        total += float(np.sum(omega * (theta - anchor) ** 2))
    return total


def ewc_penalty_grad(params: ParamSet, importance: ImportanceMap, weight: float) -> ParamSet:
    return params.map(lambda theta, omega, anchor: 2.0 * weight * omega * (theta - anchor), importance.omega, importance.anchor)


def fisher_update(
    params: ParamSet,
    dataset: Dataset,
    num_samples: int,
    rng: np.random.Generator | None = None,
    previous: ParamSet | None = None,
) -> ParamSet:
    """Empirical diagonal Fisher: mean squared per-sample gradient of log p(y|x).

    Uses every row when ``num_samples`` covers the dataset; ``previous`` is
    padded to the current shapes and added.
    """
    if len(dataset) == 0:
        raise ConfigError("fisher_update needs a nonempty dataset")
    if num_samples >= len(dataset) or rng is None:
        rows = np.arange(min(num_samples, len(dataset)))
    else:
        rows = np.sort(rng.choice(len(dataset), size=num_samples, replace=False))

    fisher = zeros_like(params)
    for i in rows:
        record = forward(params, dataset.inputs[i : i + 1])
        grads, _ = backward(params, record, cross_entropy_grad(record.probs, dataset.labels[i : i + 1]))
        fisher = fisher.map(lambda acc, g: acc + g * g, grads)
    fisher = fisher.map(lambda acc: acc / len(rows))
    if previous is not None:
        fisher = add(fisher, resize_like(previous, params))
    return fisher


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g`` onto the half-space <g, g_ref> >= 0."""
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    ref_sq = float(g_ref @ g_ref)
    if ref_sq < 1e-24:
        logger.warning("A-GEM reference gradient is degenerate; update left unprojected")
        return g
    return g - (dot / ref_sq) * g_ref


def dynamic_expand(
    params: ParamSet, widths: list[int], rng: np.random.Generator
) -> tuple[ParamSet, ParamSet]:
    """Append a freshly initialized backbone branch and freeze every earlier branch.

    The head gains zero columns for the new features, so logits are unchanged
    right after expansion. Returns (expanded params, update mask).
    """
    branch = init_branch(rng, params.input_dim, widths)
    head_weight = np.hstack([params.head_weight, np.zeros((params.num_classes, widths[-1]))])
    expanded = ParamSet(params.branches + (branch,), head_weight, params.head_bias.copy())

    def _mask_branch(b: int, layers: tuple[Layer, ...]) -> tuple[Layer, ...]:
        keep = 0.0 if b < len(params.branches) else 1.0
        return tuple(
            Layer(np.full_like(layer.weight, keep), np.full_like(layer.bias, keep), layer.activation)
            for layer in layers
        )

    mask = ParamSet(
        tuple(_mask_branch(b, layers) for b, layers in enumerate(expanded.branches)),
        np.ones_like(head_weight),
        np.ones_like(expanded.head_bias),
    )
    return expanded, mask


def snapshot(params: ParamSet) -> ParamSet:
    return params.map(np.copy)


def stratified_holdout(
    dataset: Dataset, fraction: float, rng: np.random.Generator
) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of every class (at least one row when the class has two)."""
    train_idx, val_idx = [], []
    for c in dataset.classes:
        rows = np.flatnonzero(dataset.labels == c)
        rows = rows[rng.permutation(len(rows))]
        cut = int(round(fraction * len(rows)))
        if cut == 0 and len(rows) > 1:
            cut = 1
        val_idx.append(np.sort(rows[:cut]))
        train_idx.append(np.sort(rows[cut:]))
    return dataset.take(np.concatenate(train_idx)), dataset.take(np.concatenate(val_idx))


# --- strategies ----------------------------------------------------------------


@dataclass
class StepContext:
    """Per-run plumbing the trainer hands to strategies."""

    transform: LogitTransform | None = None
    augment: Callable[[np.ndarray], np.ndarray] = lambda x: x


class Strategy:
    kind = "naive"
    default_policy: str | None = None
    buffer_mode = "raw"
    trains_on_stream = True
    retrains_from_buffer = False

    def __init__(self, cfg: ExperimentConfig, seed: int, ctx: StepContext | None = None) -> None:
        self.cfg = cfg.strategy
        self.hidden = cfg.model.hidden
        self.seed = seed
        self.ctx = ctx or StepContext()
        self.replay_rng = make_rng(seed, "replay")
        self.reservoir_rng = make_rng(seed, "reservoir")
        self.buffer: ExemplarBuffer | None = None
        if self.default_policy is not None:
            policy = self.default_policy if self.cfg.buffer_policy == "auto" else self.cfg.buffer_policy
            self.buffer = ExemplarBuffer(self.cfg.buffer_capacity, policy, self.buffer_mode)

    # hooks

    def before_task(self, learner: Learner, stream: TaskStream, b: int) -> Dataset:
        return stream.train[b]

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        return [ce_term("ce", forward(learner.params, x), y, transform=self.ctx.transform)]

    def after_backward(self, learner: Learner, grads: ParamSet) -> ParamSet:
        return grads

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        return None

    def retrain_data(self) -> Dataset | None:
        return None

    # shared helpers

    def _replay_terms(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        current = forward(learner.params, x)
        if self.buffer is None or len(self.buffer) == 0:
            return [ce_term("ce", current, y, transform=self.ctx.transform)]
        bx, by = sample(self.buffer, len(x), self.replay_rng)
        replayed = forward(learner.params, self.ctx.augment(bx))
        return replay_terms(
            ce_term("ce", current, y, transform=self.ctx.transform),
            ce_term("replay", replayed, by, transform=self.ctx.transform),
            self.cfg.alpha,
        )

    def _update_buffer(self, learner: Learner, task: Dataset, classes_seen: np.ndarray) -> None:
        if self.buffer is None:
            return
        record = forward(learner.params, task.inputs)
        stored = record.features if self.buffer.mode == "feature" else task.inputs
        if self.buffer.policy == "reservoir":
            for i in range(len(task)):
                item = Exemplar(stored[i].copy(), int(task.labels[i]), record.logits[i].copy())
                reservoir_update(self.buffer, item, self.reservoir_rng)
        else:
            class_balanced_update(self.buffer, task, classes_seen, self._herding_features(record, task), record.logits)
        logger.info("Buffer after update: %d/%d entries over %d classes", len(self.buffer), self.buffer.capacity, len(self.buffer.class_counts()))

    def _herding_features(self, record: ForwardRecord, task: Dataset) -> np.ndarray:
        return record.features


class NaiveStrategy(Strategy):
    kind = "naive"


class CumulativeStrategy(Strategy):
    kind = "cumulative"

    def before_task(self, learner: Learner, stream: TaskStream, b: int) -> Dataset:
        return Dataset.concat(list(stream.train[: b + 1]))


class ReplayStrategy(Strategy):
    kind = "replay"
    default_policy = "reservoir"

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        return self._replay_terms(learner, x, y)

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))


class GDumbStrategy(Strategy):
    """Greedy class-balanced sampler; the model is retrained from scratch on the buffer only."""

    kind = "gdumb"
    default_policy = "class-balanced"
    trains_on_stream = False
    retrains_from_buffer = True

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))

    def _herding_features(self, record: ForwardRecord, task: Dataset) -> np.ndarray:
        return task.inputs

    def retrain_data(self) -> Dataset | None:
        if self.buffer is None or len(self.buffer) == 0:
            return None
        return as_dataset(self.buffer, canonical=True)


class LwFStrategy(Strategy):
    kind = "lwf"

    def __init__(self, cfg: ExperimentConfig, seed: int, ctx: StepContext | None = None) -> None:
        super().__init__(cfg, seed, ctx)
        self.teacher: ParamSet | None = None

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        terms = super().assemble_loss(learner, x, y)
        return terms + self._kd_terms(terms[0].record, x)

    def _kd_terms(self, record: ForwardRecord | None, x: np.ndarray) -> list[LossTerm]:
        if self.teacher is None or self.cfg.kd_weight == 0.0 or record is None:
            return []
        teacher_logits = forward(self.teacher, x).logits
        return [
            kd_term(
                "kd",
                record,
                teacher_logits,
                self.teacher.num_classes,
                self.cfg.kd_weight,
                self.cfg.kd_temperature,
                self.ctx.transform,
            )
        ]

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        self.teacher = snapshot(learner.params)


class EWCStrategy(Strategy):
    kind = "ewc"

    def __init__(self, cfg: ExperimentConfig, seed: int, ctx: StepContext | None = None) -> None:
        super().__init__(cfg, seed, ctx)
        self.importance: ImportanceMap | None = None
        self.fisher_rng = make_rng(seed, "fisher")

    def before_task(self, learner: Learner, stream: TaskStream, b: int) -> Dataset:
        if self.importance is not None:
            self.importance = self.importance.resized(learner.params)
        return stream.train[b]

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        terms = super().assemble_loss(learner, x, y)
        if self.importance is None or self.cfg.reg_weight == 0.0:
            return terms
        weight = self.cfg.reg_weight
        value = weight * ewc_penalty(learner.params, self.importance)
        return terms + [LossTerm("ewc", value, param_grads=ewc_penalty_grad(learner.params, self.importance, weight))]

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        previous = None if self.importance is None else self.importance.omega
        omega = fisher_update(learner.params, stream.train[b], self.cfg.fisher_samples, self.fisher_rng, previous)
        self.importance = ImportanceMap(omega, snapshot(learner.params))
        logger.info("EWC importance updated: mean Omega %.3e", float(np.mean(flatten(omega))))


class AGEMStrategy(Strategy):
    kind = "agem"
    default_policy = "reservoir"

    def after_backward(self, learner: Learner, grads: ParamSet) -> ParamSet:
        if self.buffer is None or len(self.buffer) == 0:
            return grads
        bx, by = sample(self.buffer, self.cfg.agem_ref_batch, self.replay_rng)
        record = forward(learner.params, self.ctx.augment(bx))
        ref_term = ce_term("agem_ref", record, by, transform=self.ctx.transform)
        ref_grads, _ = backward(learner.params, record, ref_term.grad_logits)
        return unflatten(agem_project(flatten(grads), flatten(ref_grads)), grads)

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))


class ICaRLLiteStrategy(LwFStrategy):
    """Herding exemplars, replay with distillation, nearest-class-mean inference."""

    kind = "icarl-lite"
    default_policy = "class-balanced"

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        terms = self._replay_terms(learner, x, y)
        return terms + self._kd_terms(terms[0].record, x)

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        super().after_task(learner, stream, b)
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))
        assert self.buffer is not None
        learner.prototypes = recompute_from_buffer(self.buffer, learner.params)
        learner.use_ncm = True


class BiCStrategy(Strategy):
    """Trains on current data plus exemplars, then fits a scale/shift for the newest classes."""

    kind = "bic"
    default_policy = "class-balanced"

    def __init__(self, cfg: ExperimentConfig, seed: int, ctx: StepContext | None = None) -> None:
        super().__init__(cfg, seed, ctx)
        self.split_rng = make_rng(seed, "split")
        self.validation: Dataset | None = None

    def before_task(self, learner: Learner, stream: TaskStream, b: int) -> Dataset:
        current = stream.train[b]
        self.validation = None
        if self.buffer is None or len(self.buffer) == 0:
            return current
        pooled = Dataset.concat([current, as_dataset(self.buffer)])
        train, self.validation = stratified_holdout(pooled, self.cfg.bic_val_fraction, self.split_rng)
        return train

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        start, end = stream.classes_up_to(b - 1), stream.classes_up_to(b)
        alpha, beta = 1.0, 0.0
        if b > 0 and self.validation is not None and len(self.validation):
            logits = forward(learner.params, self.validation.inputs).logits
            alpha, beta = bic_fit(logits, self.validation.labels, (start, end))
            logger.info("BiC stage %d fitted: alpha=%.4f beta=%.4f", b + 1, alpha, beta)
        if learner.bic is None:
            learner.bic = BiCLayer()
        learner.bic.add_stage(start, end, alpha, beta)
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))


class DynamicERLiteStrategy(Strategy):
    """Grows a new backbone branch per task, freezes the old ones and replays from a reservoir."""

    kind = "dynamic-er-lite"
    default_policy = "reservoir"

    def __init__(self, cfg: ExperimentConfig, seed: int, ctx: StepContext | None = None) -> None:
        super().__init__(cfg, seed, ctx)
        self.branch_rng = make_rng(seed, "branch")

    def before_task(self, learner: Learner, stream: TaskStream, b: int) -> Dataset:
        if b > 0:
            width = self.cfg.branch_width or self.hidden[-1]
            learner.params, learner.frozen_mask = dynamic_expand(
                learner.params, list(self.hidden[:-1]) + [width], self.branch_rng
            )
            logger.info("Expanded backbone to %d branches (feature dim %d)", len(learner.params.branches), learner.params.feature_dim)
        return stream.train[b]

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        return self._replay_terms(learner, x, y)

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))


class FeatureReplayStrategy(Strategy):
    """Stores features instead of inputs; replayed features only train the head."""

    kind = "feature-replay"
    default_policy = "class-balanced"
    buffer_mode = "feature"

    def assemble_loss(self, learner: Learner, x: np.ndarray, y: np.ndarray) -> list[LossTerm]:
        current = forward(learner.params, x)
        if self.buffer is None or len(self.buffer) == 0:
            return [ce_term("ce", current, y, transform=self.ctx.transform)]
        feats, by = sample(self.buffer, len(x), self.replay_rng)
        logits = head_logits(feats, learner.params.head_weight, learner.params.head_bias)
        record = ForwardRecord(feats, feats, logits, softmax(logits))
        return replay_terms(
            ce_term("ce", current, y, transform=self.ctx.transform),
            ce_term("feature_replay", record, by, transform=self.ctx.transform, head_only=True),
            self.cfg.alpha,
        )

    def after_task(self, learner: Learner, stream: TaskStream, b: int) -> None:
        self._update_buffer(learner, stream.train[b], np.arange(stream.classes_up_to(b)))


STRATEGIES: dict[str, type[Strategy]] = {
    cls.kind: cls
    for cls in (
        NaiveStrategy,
        CumulativeStrategy,
        ReplayStrategy,
        GDumbStrategy,
        LwFStrategy,
        EWCStrategy,
        AGEMStrategy,
        ICaRLLiteStrategy,
        BiCStrategy,
        DynamicERLiteStrategy,
        FeatureReplayStrategy,
    )
}


def strategy_hooks(kind: str, cfg: ExperimentConfig, seed: int, ctx: StepContext | None = None) -> Strategy:
    """Instantiate the hook bundle for ``kind``."""
    try:
        cls = STRATEGIES[kind]
    except KeyError:
        raise ConfigError(f"unknown strategy kind {kind!r}; expected one of {sorted(STRATEGIES)}") from None
    return cls(copy.deepcopy(cfg), seed, ctx)
