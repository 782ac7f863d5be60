"""Train -> calibrate -> evaluate, repeated for each task of each repetition."""

from __future__ import annotations

import asyncio
import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from cloodbench.config import MAX_WORKERS
from cloodbench.errors import CloodbenchError, ConfigError
from cloodbench.models.detector_state import DetectorState
from cloodbench.models.experiment import ExperimentConfig
from cloodbench.models.results import (
    DetectorSummary,
    DetectorTaskMetrics,
    RepetitionRecord,
    ResultsRecord,
    RunError,
)
from cloodbench.services import metrics
from cloodbench.services.datastream import (
    Dataset,
    StreamBundle,
    TaskStream,
    build_stream,
    gen_mixing_source,
    gen_outlier_set,
)
from cloodbench.services.detectors import DetectorSuite
from cloodbench.services.memory import ExemplarBuffer
from cloodbench.services.ood_train import OodObjective
from cloodbench.services.strategies import Learner
from cloodbench.services.trainer import Trainer, new_learner

logger = logging.getLogger(__name__)

OUTLIER_RADIUS_FACTOR = 3.0
MIXING_SOURCE_SIZE = 512

ScorePair = tuple[np.ndarray, np.ndarray]  # (IND scores, OOD scores)


@dataclass
class RepetitionArtifacts:
    """A repetition's record plus the raw material written next to it."""

    record: RepetitionRecord
    scores: dict[tuple[str, int], ScorePair] = field(default_factory=dict)
    external_scores: dict[tuple[str, int], ScorePair] = field(default_factory=dict)
    detector_states: dict[int, dict[str, DetectorState]] = field(default_factory=dict)
    buffer: ExemplarBuffer | None = None


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.model_dump_json(by_alias=True).encode("utf-8")).hexdigest()


def _metrics_for(task: int, pair: ScorePair) -> DetectorTaskMetrics:
    ind, ood = pair
    return DetectorTaskMetrics(
        task=task,
        auroc=metrics.auroc(ind, ood),
        fpr95=metrics.fpr_at_tpr(ind, ood),
        aupr=metrics.aupr(ind, ood),
        n_ind=len(ind),
        n_ood=len(ood),
    )


def _mean(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _std(values: list[float | None]) -> float | None:
    """Sample (ddof=1) standard deviation; None below two values."""
    present = [v for v in values if v is not None]
    return float(np.std(present, ddof=1)) if len(present) >= 2 else None


def accuracy_row(learner: Learner, stream: TaskStream, b: int) -> list[float]:
    """Accuracy on each test task 0..b after training task b."""
    row = []
    for j in range(b + 1):
        test = stream.test[j]
        row.append(float(np.mean(learner.predict(test.inputs) == test.labels)))
    return row


def evaluate_ood(
    learner: Learner, suite: DetectorSuite, stream: TaskStream, t: int
) -> dict[str, tuple[DetectorTaskMetrics, ScorePair]]:
    """Tasks 1..t are in-distribution, tasks t+1..B are OOD (t is 1-based)."""
    if not 1 <= t < stream.num_tasks:
        raise ConfigError(f"OOD evaluation needs 1 <= t < {stream.num_tasks}, got {t}")
    ind = stream.test_union(range(t))
    ood = stream.test_union(range(t, stream.num_tasks))
    out = {}
    for kind in suite.kinds:
        pair = (suite.score(kind, learner, ind.inputs), suite.score(kind, learner, ood.inputs))
        out[kind] = (_metrics_for(t, pair), pair)
    return out


def evaluate_external(
    learner: Learner, suite: DetectorSuite, ind: Dataset, outliers: np.ndarray, t: int
) -> dict[str, tuple[DetectorTaskMetrics, ScorePair]]:
    out = {}
    for kind in suite.kinds:
        pair = (suite.score(kind, learner, ind.inputs), suite.score(kind, learner, outliers))
        out[kind] = (_metrics_for(t, pair), pair)
    return out


def _ood_objective(cfg: ExperimentConfig, bundle: StreamBundle, seed: int) -> OodObjective:
    ood_cfg = cfg.ood_train
    stream = bundle.stream
    dim = stream.train[0].dim
    outliers = None
    if ood_cfg.kind == "oe":
        outliers = gen_outlier_set(
            dim,
            ood_cfg.outlier_count,
            ood_cfg.outlier_mode,
            seed,
            radius=OUTLIER_RADIUS_FACTOR * bundle.mean_norm,
            reserved=bundle.reserved,
        )
    mixing = gen_mixing_source(dim, MIXING_SOURCE_SIZE, seed) if ood_cfg.kind == "mix" else None
    return OodObjective(
        ood_cfg,
        batch_size=cfg.optimizer.batch_size,
        outliers=outliers,
        mixing_source=mixing,
        data_range=stream.data_range,
    )


def run_repetition(cfg: ExperimentConfig, repetition: int) -> RepetitionArtifacts:
    """One full pass over the task stream with seed ``run.seed + repetition``.

    Failures after setup are stored in the record rather than raised.
    """
    seed = cfg.run.seed + repetition
    record = RepetitionRecord(repetition=repetition, seed=seed)
    artifacts = RepetitionArtifacts(record)
    started = time.perf_counter()

    bundle = build_stream(cfg.stream, seed)
    stream = bundle.stream
    ood = _ood_objective(cfg, bundle, seed)
    trainer = Trainer(cfg, seed, ood)
    learner = new_learner(cfg, stream.train[0].dim, seed)
    suite = DetectorSuite(cfg.detectors, cfg.calibration)
    external = None
    if cfg.eval.external_ood:
        external = gen_outlier_set(
            stream.train[0].dim,
            cfg.eval.external_count,
            "uniform-shell",
            seed,
            radius=OUTLIER_RADIUS_FACTOR * bundle.mean_norm,
            stream="external",
        ).inputs

    summaries = {kind: DetectorSummary(detector=kind) for kind in cfg.detectors}
    final_only = cfg.eval.final_model_only
    stage = "train"
    try:
        for b in range(stream.num_tasks):
            stage = "train"
            trace = trainer.train_task(learner, stream, b)
            record.train_steps.append(trace.steps)

            stage = "calibrate"
            if not final_only or b == stream.num_tasks - 1:
                suite.calibrate(learner, stream.train[b], trainer.strategy.buffer, task_number=b + 1)
                artifacts.detector_states[b + 1] = suite.states()

            stage = "evaluate"
            record.accuracy_matrix.append(accuracy_row(learner, stream, b))
            if not final_only:
                _collect(artifacts, summaries, learner, suite, stream, b + 1, external)
            logger.info(
                "Task %d/%d done: ACA %.4f", b + 1, stream.num_tasks, metrics.aca(record.accuracy_matrix, b + 1)
            )

        if final_only:
            stage = "evaluate"
            for t in range(1, stream.num_tasks + 1):
                _collect(artifacts, summaries, learner, suite, stream, t, external)
    except (CloodbenchError, ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        record.status = "failed"
        record.error = RunError(stage=stage, error_type=type(exc).__name__, message=str(exc))
        logger.error("Repetition %d (seed %d) aborted during %s: %s", repetition, seed, stage, exc)

    matrix = record.accuracy_matrix
    record.aca = [metrics.aca(matrix, t) for t in range(1, len(matrix) + 1)]
    if matrix:
        record.final_aca = record.aca[-1]
        record.aia = metrics.aia(matrix)
        record.af = metrics.af(matrix)
    for summary in summaries.values():
        summary.mean_auroc = _mean([m.auroc for m in summary.per_task])
        summary.mean_fpr95 = _mean([m.fpr95 for m in summary.per_task])
        summary.mean_aupr = _mean([m.aupr for m in summary.per_task])
        summary.mean_external_auroc = _mean([m.auroc for m in summary.external])
        summary.mean_external_fpr95 = _mean([m.fpr95 for m in summary.external])
    record.ood = summaries
    artifacts.buffer = trainer.strategy.buffer
    record.wall_clock_seconds = time.perf_counter() - started
    return artifacts


def _collect(
    artifacts: RepetitionArtifacts,
    summaries: dict[str, DetectorSummary],
    learner: Learner,
    suite: DetectorSuite,
    stream: TaskStream,
    t: int,
    external: np.ndarray | None,
) -> None:
    if t < stream.num_tasks:
        for kind, (task_metrics, pair) in evaluate_ood(learner, suite, stream, t).items():
            summaries[kind].per_task.append(task_metrics)
            artifacts.scores[(kind, t)] = pair
    if external is not None:
        seen = stream.test_union(range(t))
        for kind, (task_metrics, pair) in evaluate_external(learner, suite, seen, external, t).items():
            summaries[kind].external.append(task_metrics)
            artifacts.external_scores[(kind, t)] = pair


def summarize(repetitions: list[RepetitionRecord], detectors: list[str]) -> dict[str, float | None]:
    """Mean and sample standard deviation (``<name>_std``) over successful repetitions."""
    ok = [r for r in repetitions if r.status == "ok"]
    summary: dict[str, float | None] = {}

    def _put(name: str, values: list[float | None]) -> None:
        summary[name] = _mean(values)
        summary[f"{name}_std"] = _std(values)

    _put("final_aca", [r.final_aca for r in ok])
    _put("aia", [r.aia for r in ok])
    _put("af", [r.af for r in ok])
    for kind in detectors:
        _put(f"{kind}_auroc", [r.ood[kind].mean_auroc for r in ok if kind in r.ood])
        _put(f"{kind}_fpr95", [r.ood[kind].mean_fpr95 for r in ok if kind in r.ood])
    return summary


def _assemble(cfg: ExperimentConfig, artifacts: list[RepetitionArtifacts]) -> ResultsRecord:
    artifacts.sort(key=lambda a: a.record.seed)
    reps = [a.record for a in artifacts]
    return ResultsRecord(
        config_hash=config_hash(cfg),
        strategy=cfg.strategy.kind,
        ood_train=cfg.ood_train.kind,
        detectors=list(cfg.detectors),
        num_tasks=cfg.stream.num_tasks,
        eval_snapshot="final" if cfg.eval.final_model_only else "per-task",
        repetitions=reps,
        summary=summarize(reps, cfg.detectors),
    )


def run_experiment(cfg: ExperimentConfig) -> tuple[ResultsRecord, list[RepetitionArtifacts]]:
    """Run every repetition, sequentially or fanned out over threads when ``run.parallel`` is set."""
    logger.info(
        "Running %s + %s, %d repetition(s), detectors %s",
        cfg.strategy.kind,
        cfg.ood_train.kind,
        cfg.run.repetitions,
        ",".join(cfg.detectors),
    )
    if cfg.run.parallel and cfg.run.repetitions > 1:
        artifacts = asyncio.run(run_repetitions_async(cfg))
    else:
        artifacts = [run_repetition(cfg, r) for r in range(cfg.run.repetitions)]
    return _assemble(cfg, artifacts), artifacts


async def run_repetitions_async(cfg: ExperimentConfig) -> list[RepetitionArtifacts]:
    """Repetitions share no mutable state, so each runs in its own worker thread."""
    semaphore = asyncio.Semaphore(max(1, min(cfg.run.max_workers, MAX_WORKERS)))

    async def _one(r: int) -> RepetitionArtifacts:
        async with semaphore:
            return await asyncio.to_thread(run_repetition, cfg, r)

    return list(await asyncio.gather(*(_one(r) for r in range(cfg.run.repetitions))))
