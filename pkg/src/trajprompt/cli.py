"""Command-line entry point: ``trajprompt <stage> --config run.yaml``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import ConfigError, PipelineConfig, load_config
from .evaluation import FingerprintMismatch, compare_runs, format_deltas
from .pipeline import (
    MissingArtifact,
    Run,
    cmd_embed,
    cmd_emit,
    cmd_evaluate,
    cmd_pipeline,
    cmd_predict,
    cmd_preprocess,
    cmd_retrieve,
    load_report,
)
from .prompting import Variant

log = logging.getLogger("trajprompt")

EXIT_OK, EXIT_FATAL = 0, 1


def _budgets(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("budgets must be non-negative integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline YAML config")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--workers", type=int, help="override intra-stage parallelism")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--force", action="store_true", help="recompute even if inputs are unchanged")

    variant = argparse.ArgumentParser(add_help=False)
    variant.add_argument("--variant", choices=[v.value for v in Variant])
    variant.add_argument("--budget", type=int, help="override retrieval.history_checkin_budget")

    p = argparse.ArgumentParser(prog="trajprompt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", parents=[common], help="parse, filter, segment and split check-ins")
    sub.add_parser("embed", parents=[common], help="embed key and query prompts")
    sub.add_parser("retrieve", parents=[common, variant], help="select history for every trajectory")
    sub.add_parser("emit", parents=[common, variant], help="write question/answer corpora")
    sub.add_parser("predict", parents=[common, variant], help="query the completion endpoint")
    ev = sub.add_parser("evaluate", parents=[common, variant], help="compute Acc@1 and breakdowns")
    ev.add_argument("--compare", metavar="REPORT_JSON", help="print deltas against another report")
    pl = sub.add_parser("pipeline", parents=[common, variant], help="run all stages, skipping unchanged ones")
    pl.add_argument("--budget-sweep", type=_budgets, metavar="N,N,...", help="one corpus and report per budget")
    return p


def apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = dataclasses.replace(cfg, workers=args.workers)
    if getattr(args, "variant", None):
        cfg = dataclasses.replace(cfg, prompting=dataclasses.replace(cfg.prompting, variant=args.variant))
    if getattr(args, "budget", None) is not None:
        cfg = dataclasses.replace(
            cfg, retrieval=dataclasses.replace(cfg.retrieval, history_checkin_budget=args.budget)
        )
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = apply_overrides(load_config(args.config), args)
        run = Run(cfg)
        if args.command == "pipeline":
            runs = cmd_pipeline(cfg, budgets=args.budget_sweep, force=args.force)
            for r in runs:
                report = (r.stage_dir("evaluate") / "report.txt").read_text(encoding="utf-8")
                label = f"budget {r.config.retrieval.history_checkin_budget}" if args.budget_sweep else "report"
                print(f"== {label} ==\n{report}", end="")
            return EXIT_OK
        if args.command == "retrieve" and cfg.retrieval_config().history_checkin_budget == 0:
            log.info("history budget is 0; nothing to retrieve")
            return EXIT_OK
        stage = {
            "preprocess": cmd_preprocess,
            "embed": cmd_embed,
            "retrieve": cmd_retrieve,
            "emit": cmd_emit,
            "predict": cmd_predict,
            "evaluate": cmd_evaluate,
        }[args.command]
        out = stage(run, args.force)
        print(out)
        if args.command == "evaluate":
            print((out / "report.txt").read_text(encoding="utf-8"), end="")
            if args.compare:
                deltas = compare_runs(load_report(args.compare), load_report(out / "report.json"))
                print(format_deltas(deltas), end="")
        return EXIT_OK
    except (ConfigError, MissingArtifact, FingerprintMismatch, FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
