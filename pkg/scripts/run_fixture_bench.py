#!/usr/bin/env python3
"""Build the scripted 20-question benchmark, run it, and print every sweep table.

No model server needed: both roles are served by scripted backends.

    python3 scripts/run_fixture_bench.py --workdir /tmp/slmsql-demo
"""
import argparse
import logging
import tempfile
from pathlib import Path

from slmsql.bench import format_summary, format_table, load_run_config, run_ablation, run_bench
from slmsql.fixtures import build_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--workdir", type=Path, default=None, help="where to build (default: a temp dir)")
    ap.add_argument("--axes", nargs="*", default=["components", "candidates", "rounds"])
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    workdir = args.workdir or Path(tempfile.mkdtemp(prefix="slmsql-"))
    config_path = build_benchmark(workdir)
    config = load_run_config(config_path)
    print(f"benchmark built in {workdir}\n")

    report = run_bench(config, config.output_dir / "full")
    print(format_summary(report))
    for axis in args.axes:
        print(f"== {axis}")
        print(format_table(run_ablation(config, axis)))


if __name__ == "__main__":
    main()
