"""Strategy x OOD-objective grids: one results directory per cell plus a comparison table."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from cloodbench.errors import ConfigError
from cloodbench.models.experiment import ExperimentConfig
from cloodbench.models.results import SweepReport, SweepRow
from cloodbench.services.config_parser import with_overrides
from cloodbench.services.results_io import emit_results
from cloodbench.services.runner import run_experiment

logger = logging.getLogger(__name__)

COMPARISON_CSV = "comparison.csv"
COMPARISON_JSON = "comparison.json"
ROW_KEYS = ("strategy", "ood_train", "failed_repetitions")


def cell_name(strategy: str, ood_train: str) -> str:
    return f"{strategy}__{ood_train}"


def run_sweep(
    cfg: ExperimentConfig,
    strategies: list[str],
    ood_kinds: list[str],
    out_dir: str | Path,
) -> SweepReport:
    """Run every (strategy, ood_train) pair on ``cfg`` and write the comparison table.

    All cells are validated before the first one trains.
    """
    if not strategies or not ood_kinds:
        raise ConfigError("a sweep needs at least one strategy and one ood_train kind")
    out = Path(out_dir)
    cells = [
        (
            strategy,
            ood,
            with_overrides(
                cfg,
                strategy={"kind": strategy},
                ood_train={"kind": ood},
                run={"output_dir": str(out / cell_name(strategy, ood))},
            ),
        )
        for strategy in dict.fromkeys(strategies)
        for ood in dict.fromkeys(ood_kinds)
    ]

    rows = []
    for i, (strategy, ood, cell) in enumerate(cells, start=1):
        logger.info("Sweep cell %d/%d: %s + %s", i, len(cells), strategy, ood)
        record, artifacts = run_experiment(cell)
        emit_results(record, artifacts, cell.run.output_dir)
        rows.append(
            SweepRow(
                strategy=strategy,
                ood_train=ood,
                output_dir=cell.run.output_dir,
                config_hash=record.config_hash,
                failed_repetitions=sum(r.status == "failed" for r in record.repetitions),
                summary=record.summary,
            )
        )

    report = SweepReport(rows=rows)
    write_comparison(report, out)
    return report


def write_comparison(report: SweepReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / COMPARISON_JSON).write_text(report.model_dump_json(indent=2), encoding="utf-8")

    metric_keys = list(dict.fromkeys(key for row in report.rows for key in row.summary))
    path = out / COMPARISON_CSV
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=[*ROW_KEYS, *metric_keys])
        writer.writeheader()
        for row in report.rows:
            values = {key: "" if row.summary.get(key) is None else row.summary[key] for key in metric_keys}
            writer.writerow(
                {
                    "strategy": row.strategy,
                    "ood_train": row.ood_train,
                    "failed_repetitions": row.failed_repetitions,
                    **values,
                }
            )
    logger.info("Comparison of %d cell(s) written to %s", len(report.rows), path)
    return path


def read_comparison(out_dir: str | Path) -> SweepReport:
    path = Path(out_dir) / COMPARISON_JSON
    if not path.is_file():
        raise ConfigError(f"{path} not found")
    return SweepReport.model_validate_json(path.read_text(encoding="utf-8"))
