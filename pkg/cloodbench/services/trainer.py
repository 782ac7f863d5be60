"""Per-task training loop with fixed hook order.

strategy.assemble_loss -> OOD loss term -> backward -> strategy.after_backward
-> optimizer step.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from cloodbench.models.experiment import ExperimentConfig
from cloodbench.services.datastream import Dataset, TaskStream
from cloodbench.services.losses import LossTerm
from cloodbench.services.network import (
    OptimizerState,
    ParamSet,
    add,
    backward,
    expand_head,
    head_backward,
    init_params,
    sgd_step,
    zeros_like,
)
from cloodbench.services.ood_train import OodObjective
from cloodbench.services.seeding import make_rng
from cloodbench.services.strategies import Learner, StepContext, Strategy, strategy_hooks

logger = logging.getLogger(__name__)


@dataclass
class TaskTrace:
    task: int
    samples: int
    steps: int = 0
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None


def make_optimizer(cfg: ExperimentConfig) -> OptimizerState:
    opt, strat = cfg.optimizer, cfg.strategy
    return OptimizerState(
        lr=strat.lr if strat.lr is not None else opt.lr,
        momentum=opt.momentum,
        weight_decay=strat.weight_decay if strat.weight_decay is not None else opt.weight_decay,
        milestones=tuple(opt.milestones),
    )


def new_learner(cfg: ExperimentConfig, input_dim: int, seed: int) -> Learner:
    params = init_params(make_rng(seed, "init"), input_dim, cfg.model.hidden)
    return Learner(params, make_optimizer(cfg))


def backprop_terms(params: ParamSet, terms: list[LossTerm]) -> ParamSet:
    """Sum of parameter gradients over all loss terms."""
    total: ParamSet | None = None
    for term in terms:
        if term.param_grads is not None:
            grads = term.param_grads
        elif term.record is None or term.grad_logits is None:
            continue
        elif term.head_only:
            gw, gb = head_backward(term.record.features, term.grad_logits)
            grads = params.with_arrays(
                [np.zeros_like(a) for a in params.arrays()[:-2]] + [gw, gb]
            )
        else:
            grads, _ = backward(params, term.record, term.grad_logits)
        total = grads if total is None else add(total, grads)
    return total if total is not None else zeros_like(params)


class Trainer:
    """Owns the shuffling and augmentation streams of one repetition."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        seed: int,
        ood: OodObjective | None = None,
        on_step: Callable[[Learner], None] | None = None,
    ) -> None:
        self.cfg = cfg
        self.seed = seed
        self.ood = ood
        self.on_step = on_step
        self.shuffle_rng = make_rng(seed, "shuffle")
        self.augment_rng = make_rng(seed, "augment")
        self.oe_rng = make_rng(seed, "oe_batch")
        ctx = StepContext()
        if ood is not None:
            ctx = StepContext(transform=ood.transform, augment=lambda x: ood.augment(x, self.augment_rng))
        self.ctx = ctx
        self.strategy: Strategy = strategy_hooks(cfg.strategy.kind, cfg, seed, ctx)

    def train_task(self, learner: Learner, stream: TaskStream, b: int) -> TaskTrace:
        learner.params = expand_head(learner.params, stream.classes_per_task[b])
        learner.optimizer = make_optimizer(self.cfg)
        data = self.strategy.before_task(learner, stream, b)
        trace = TaskTrace(task=b + 1, samples=len(data) if self.strategy.trains_on_stream else 0)
        logger.info(
            "Task %d/%d: training %s on %d samples (%d classes)",
            b + 1,
            stream.num_tasks,
            self.strategy.kind,
            trace.samples,
            learner.params.num_classes,
        )
        if self.strategy.trains_on_stream:
            self.fit(learner, data, trace)
        self.strategy.after_task(learner, stream, b)

        if self.strategy.retrains_from_buffer:
            self._retrain_from_buffer(learner, trace)
        return trace

    def fit(self, learner: Learner, data: Dataset, trace: TaskTrace) -> None:
        batch = self.cfg.optimizer.batch_size
        for epoch in range(self.cfg.optimizer.epochs):
            order = self.shuffle_rng.permutation(len(data))
            epoch_loss = 0.0
            for start in range(0, len(data), batch):
                idx = order[start : start + batch]
                x = data.inputs[idx]
                if self.ood is not None:
                    x = self.ood.augment(x, self.augment_rng)
                epoch_loss += self.step(learner, x, data.labels[idx], epoch) * len(idx)
                trace.steps += 1
            trace.losses.append(epoch_loss / max(len(data), 1))
        logger.debug("Task %d finished after %d steps, final loss %.4f", trace.task, trace.steps, trace.final_loss or 0.0)

    def step(self, learner: Learner, x: np.ndarray, y: np.ndarray, epoch: int) -> float:
        terms = self.strategy.assemble_loss(learner, x, y)
        if self.ood is not None:
            terms += self.ood.loss_terms(learner.params, self.oe_rng)
        grads = backprop_terms(learner.params, terms)
        grads = self.strategy.after_backward(learner, grads)
        learner.params = sgd_step(learner.params, grads, learner.optimizer, epoch, learner.frozen_mask)
        if self.on_step is not None:
            self.on_step(learner)
        return sum(t.value for t in terms)

    def _retrain_from_buffer(self, learner: Learner, trace: TaskTrace) -> None:
        """Discard the model and train a fresh one on the canonical buffer contents."""
        data = self.strategy.retrain_data()
        num_classes = learner.params.num_classes
        fresh = init_params(make_rng(self.seed, "init"), learner.params.input_dim, self.cfg.model.hidden, num_classes)
        learner.params = fresh
        learner.optimizer = make_optimizer(self.cfg)
        if data is None:
            logger.warning("Buffer is empty; retrained model keeps its fresh initialization")
            return
        saved = self.shuffle_rng, self.augment_rng, self.oe_rng
        self.shuffle_rng = make_rng(self.seed, "shuffle")
        self.augment_rng = make_rng(self.seed, "augment")
        self.oe_rng = make_rng(self.seed, "oe_batch")
        trace.samples = len(data)
        try:
            self.fit(learner, data, trace)
        finally:
            self.shuffle_rng, self.augment_rng, self.oe_rng = saved
