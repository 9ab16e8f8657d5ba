#!/usr/bin/env python3
"""Ask a handful of fixture questions against a real OpenAI-compatible server.

    python3 scripts/live_smoke.py --base-url http://localhost:8000 --model Qwen2.5-Coder-1.5B-Instruct

Point --sql-model at a second model to run the 1+1 split; by default one
model serves both roles.
"""
import argparse
import json
import os
import tempfile
from pathlib import Path

from slmsql.bench import format_summary, load_run_config, run_bench
from slmsql.evaluation import load_dataset
from slmsql.fixtures import build_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--base-url", default=os.environ.get("SLMSQL_LIVE_BASE_URL"))
    ap.add_argument("--model", default=os.environ.get("SLMSQL_LIVE_MODEL", "default"))
    ap.add_argument("--sql-model", default=None)
    ap.add_argument("--limit", type=int, default=5)
    ap.add_argument("--workdir", type=Path, default=None)
    args = ap.parse_args()
    if not args.base_url:
        ap.error("--base-url (or SLMSQL_LIVE_BASE_URL) is required")

    workdir = args.workdir or Path(tempfile.mkdtemp(prefix="slmsql-live-"))
    config_path = build_benchmark(workdir)
    raw = json.loads(config_path.read_text())
    http = {"type": "http", "base_url": args.base_url, "api_key_env": "SLMSQL_LIVE_API_KEY"}
    raw["backends"] = {"sql": {**http, "model": args.sql_model or args.model}}
    if args.sql_model:
        raw["backends"]["chat"] = {**http, "model": args.model}
    raw["pipeline"]["exec_timeout"] = 30
    config_path.write_text(json.dumps(raw, indent=2))
    os.environ.setdefault("SLMSQL_LIVE_API_KEY", "")

    config = load_run_config(config_path)
    examples = load_dataset(config.dataset_path)[: args.limit]
    report = run_bench(config, config.output_dir / "live", examples=examples)
    print(format_summary(report))
    print(f"traces: {config.output_dir / 'live' / 'traces'}")


if __name__ == "__main__":
    main()
