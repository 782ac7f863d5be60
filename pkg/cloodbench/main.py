import argparse
import json
import logging
import sys
from pathlib import Path

from cloodbench.config import LOG_LEVEL, RESULTS_DIR
from cloodbench.errors import EXIT_OK, EXIT_RUNTIME, CloodbenchError
from cloodbench.services.config_parser import parse_config
from cloodbench.services.datastream import generate_tables, write_csv
from cloodbench.services.results_io import emit_results, recompute
from cloodbench.services.runner import run_experiment
from cloodbench.services.sweep import run_sweep

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloodbench", description="Continual learning + OOD detection benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment")
    run.add_argument("--config", required=True, help="Path to a section.key = value config file")
    run.add_argument("--seed", type=int, default=None, help="Override run.seed")
    run.add_argument("--out", default=None, help="Override run.output_dir")

    gen = sub.add_parser("gen-data", help="Write the synthetic train/test tables as CSV")
    gen.add_argument("--spec", required=True, help="Config file whose stream.* keys describe the data")
    gen.add_argument("--out", default=None, help="Output directory (default: <results dir>/data)")

    ev = sub.add_parser("eval", help="Recompute metrics from an emitted results directory")
    ev.add_argument("--results", required=True, help="Directory containing results.json and rep_* folders")

    sweep = sub.add_parser("sweep", help="Run a strategy x OOD-objective grid and write a comparison table")
    sweep.add_argument("--config", required=True, help="Base config; each cell overrides strategy.kind and ood_train.kind")
    sweep.add_argument("--strategies", default=None, help="Comma-separated strategy kinds (default: the config's)")
    sweep.add_argument("--ood-train", default=None, help="Comma-separated ood_train kinds (default: the config's)")
    sweep.add_argument("--out", default=None, help="Sweep directory (default: run.output_dir)")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update=updates)})

    record, artifacts = run_experiment(cfg)
    emit_results(record, artifacts, cfg.run.output_dir)
    failed = [r for r in record.repetitions if r.status == "failed"]
    if failed:
        logger.error("%d of %d repetition(s) failed", len(failed), len(record.repetitions))
        return EXIT_RUNTIME
    logger.info("Summary: %s", json.dumps(record.summary))
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = parse_config(args.spec)
    out = Path(args.out or Path(RESULTS_DIR) / "data")
    train, test, reserved = generate_tables(cfg.stream, cfg.run.seed)
    write_csv(train, out / "train.csv")
    write_csv(test, out / "test.csv")
    if reserved is not None:
        write_csv(reserved, out / "reserved.csv")
    logger.info("Wrote %d train / %d test rows to %s", len(train), len(test), out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    report = recompute(args.results)
    out = Path(args.results) / "recomputed.json"
    out.write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _split(value: str | None, fallback: str) -> list[str]:
    if value is None:
        return [fallback]
    return [item.strip() for item in value.split(",") if item.strip()]


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    report = run_sweep(
        cfg,
        _split(args.strategies, cfg.strategy.kind),
        _split(args.ood_train, cfg.ood_train.kind),
        args.out or cfg.run.output_dir,
    )
    if report.failed_repetitions:
        logger.error("%d repetition(s) failed across the sweep", report.failed_repetitions)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"run": cmd_run, "gen-data": cmd_gen_data, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CloodbenchError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
