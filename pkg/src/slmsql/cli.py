"""Command-line entry point.

    slmsql ask --config C --db DBID "question"
    slmsql bench --config C [--no-pruning|--no-linking|--no-multi-candidate|--no-correction|--no-selection]
    slmsql ablate --config C --axis {components,candidates,rounds}
    slmsql report --traces DIR

Exit codes: 0 success, 1 config/dataset/database error, 2 backend error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (
    TraceStore,
    build_pipeline,
    components_label,
    format_summary,
    format_table,
    load_run_config,
    report_from_traces,
    run_ablation,
    run_bench,
)
from .errors import BackendError, SlmSqlError, StageError
from .pipeline import COMPONENT_NAMES, QuestionTask, format_preview

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND = 0, 1, 2


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slmsql", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", help="answer one question")
    _add_config(ask)
    ask.add_argument("--db", required=True, help="database id under db_root")
    ask.add_argument("--hint", default=None)
    ask.add_argument("question")

    bench = sub.add_parser("bench", help="run the configured dataset")
    _add_config(bench)
    bench.add_argument("--output", type=Path, default=None, help="run directory (default: output_dir from config)")
    for name in COMPONENT_NAMES:
        bench.add_argument(f"--no-{name.replace('_', '-')}", dest=f"no_{name}", action="store_true")

    ablate = sub.add_parser("ablate", help="sweep one axis")
    _add_config(ablate)
    ablate.add_argument("--axis", required=True, choices=["components", "candidates", "rounds"])
    ablate.add_argument("--output", type=Path, default=None)

    report = sub.add_parser("report", help="recompute metrics from a trace directory")
    report.add_argument("--traces", required=True, type=Path)
    return parser


def cmd_ask(args) -> int:
    config = load_run_config(args.config)
    pipeline = build_pipeline(config)
    task = QuestionTask(args.question, args.db, args.hint, question_id="ask")
    result = pipeline.run(task)
    out_dir = config.output_dir / "ask"
    trace_path = TraceStore(out_dir).write({"question_id": "ask", **result.to_record()})
    if result.selected is None:
        print("no executable candidate")
    else:
        print(result.selected.sql)
        print()
        print(format_preview(result.selected.outcome, config.pipeline.result_preview_rows))
    print(f"\ntrace: {trace_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_run_config(args.config)
    comps = config.pipeline.components
    for name in COMPONENT_NAMES:
        if getattr(args, f"no_{name}"):
            comps = replace(comps, **{name: False})
    pipeline_config = replace(config.pipeline, components=comps)
    run_dir = args.output or config.output_dir / components_label(comps)
    report = run_bench(config, run_dir, pipeline_config)
    print(format_summary(report), end="")
    print(f"\nrun directory: {run_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = load_run_config(args.config)
    rows = run_ablation(config, args.axis, args.output)
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    trace_dir = args.traces
    run_dir = trace_dir.parent
    report = report_from_traces(trace_dir, run_dir)
    print(report.to_json(), end="")
    print(format_summary(report), end="", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"ask": cmd_ask, "bench": cmd_bench, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: backend failure in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_BACKEND
    except BackendError as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except SlmSqlError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
