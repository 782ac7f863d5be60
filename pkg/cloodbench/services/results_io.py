"""Results directory layout: writing a run and recomputing metrics from it.

    <dir>/results.json
    <dir>/rep_<seed>/acc_matrix.csv
    <dir>/rep_<seed>/ood_scores/<detector>_<task>.csv
    <dir>/rep_<seed>/ood_scores/external/<detector>_<task>.csv
    <dir>/rep_<seed>/detectors/task_<b>.json
    <dir>/rep_<seed>/buffer.csv
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from cloodbench.errors import ConfigError
from cloodbench.models.results import ResultsRecord
from cloodbench.services import metrics
from cloodbench.services.memory import write_buffer_csv
from cloodbench.services.runner import RepetitionArtifacts, ScorePair

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.json"


def write_acc_matrix(matrix: list[list[float]], path: Path) -> None:
    width = len(matrix)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"task{j + 1}" for j in range(width)])
        for row in matrix:
            writer.writerow([repr(v) for v in row] + [""] * (width - len(row)))


def read_acc_matrix(path: Path) -> list[list[float]]:
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        return [[float(cell) for cell in row if cell != ""] for row in reader if row]


def write_scores(pair: ScorePair, path: Path) -> None:
    ind, ood = pair
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["score", "is_ood"])
        for s in ind:
            writer.writerow([repr(float(s)), 0])
        for s in ood:
            writer.writerow([repr(float(s)), 1])


def read_scores(path: Path) -> ScorePair:
    ind, ood = [], []
    with path.open("r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            (ood if row["is_ood"].strip() == "1" else ind).append(float(row["score"]))
    return np.array(ind), np.array(ood)


def emit_results(record: ResultsRecord, artifacts: list[RepetitionArtifacts], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESULTS_FILE).write_text(record.model_dump_json(indent=2), encoding="utf-8")

    for rep in artifacts:
        rep_dir = out / f"rep_{rep.record.seed}"
        scores_dir = rep_dir / "ood_scores"
        scores_dir.mkdir(parents=True, exist_ok=True)
        write_acc_matrix(rep.record.accuracy_matrix, rep_dir / "acc_matrix.csv")
        for (kind, task), pair in sorted(rep.scores.items()):
            write_scores(pair, scores_dir / f"{kind}_{task}.csv")
        if rep.external_scores:
            (scores_dir / "external").mkdir(exist_ok=True)
            for (kind, task), pair in sorted(rep.external_scores.items()):
                write_scores(pair, scores_dir / "external" / f"{kind}_{task}.csv")
        if rep.detector_states:
            (rep_dir / "detectors").mkdir(exist_ok=True)
            for task, states in sorted(rep.detector_states.items()):
                payload = {kind: state.model_dump() for kind, state in states.items()}
                (rep_dir / "detectors" / f"task_{task}.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
        if rep.buffer is not None and len(rep.buffer):
            write_buffer_csv(rep.buffer, rep_dir / "buffer.csv")

    logger.info("Results written to %s", out)
    return out / RESULTS_FILE


def load_results(out_dir: str | Path) -> ResultsRecord:
    path = Path(out_dir) / RESULTS_FILE
    if not path.is_file():
        raise ConfigError(f"{path} not found")
    return ResultsRecord.model_validate_json(path.read_text(encoding="utf-8"))


def _score_metrics(folder: Path) -> dict[str, dict[int, dict[str, float | None]]]:
    out: dict[str, dict[int, dict[str, float | None]]] = {}
    for path in sorted(folder.glob("*.csv")):
        kind, _, task = path.stem.rpartition("_")
        if not kind or not task.isdigit():
            logger.warning("Skipping unrecognized score file %s", path.name)
            continue
        ind, ood = read_scores(path)
        out.setdefault(kind, {})[int(task)] = {
            "auroc": metrics.auroc(ind, ood),
            "fpr95": metrics.fpr_at_tpr(ind, ood),
            "aupr": metrics.aupr(ind, ood),
        }
    return out


def recompute(out_dir: str | Path) -> dict[str, Any]:
    """Recompute CL and OOD metrics from the CSV artifacts of every repetition."""
    root = Path(out_dir)
    rep_dirs = sorted(p for p in root.glob("rep_*") if p.is_dir())
    if not rep_dirs:
        raise ConfigError(f"no rep_* directories under {root}")

    report: dict[str, Any] = {}
    for rep_dir in rep_dirs:
        matrix = read_acc_matrix(rep_dir / "acc_matrix.csv")
        entry: dict[str, Any] = {
            "aca": [metrics.aca(matrix, t) for t in range(1, len(matrix) + 1)],
            "aia": metrics.aia(matrix) if matrix else None,
            "af": metrics.af(matrix),
            "ood": {},
            "external": {},
        }
        for key, folder in (("ood", rep_dir / "ood_scores"), ("external", rep_dir / "ood_scores" / "external")):
            if not folder.is_dir():
                continue
            for kind, per_task in _score_metrics(folder).items():
                aurocs = [m["auroc"] for m in per_task.values() if m["auroc"] is not None]
                fprs = [m["fpr95"] for m in per_task.values() if m["fpr95"] is not None]
                entry[key][kind] = {
                    "per_task": {str(t): m for t, m in sorted(per_task.items())},
                    "mean_auroc": float(np.mean(aurocs)) if aurocs else None,
                    "mean_fpr95": float(np.mean(fprs)) if fprs else None,
                }
        report[rep_dir.name] = entry
    return report
