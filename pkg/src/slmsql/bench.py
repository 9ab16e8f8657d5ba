"""Benchmark runs over a dataset: run config, traces, reports, ablations.

Every question produces one trace record, written to ``<trace_dir>/<qid>.jsonl``
through a temp file and an atomic rename. Reports are always recomputed from
the trace directory, so ``bench`` and ``report`` produce identical output.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .backend import ModelRole, ModelRouter
from .errors import CorruptTrace, DatabaseUnavailable, InvalidConfig, StageError
from .evaluation import (
    CandidateOutcome,
    DatasetExample,
    EvalRecord,
    Report,
    compute_report,
    judge_outcomes,
    load_dataset,
    sweep,
)
from .executor import execute
from .pipeline import COMPONENT_NAMES, Components, PathKind, Pipeline, PipelineConfig, QuestionTask
from .prompts import load_templates

log = logging.getLogger(__name__)

RUN_CONFIG_FILE = "run_config.json"
REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.txt"
_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate_env(value):
    """Expand ``${VAR}`` and ``${VAR:-default}`` in every string of a JSON value."""
    if isinstance(value, str):
        def sub(m):
            if m.group(1) in os.environ:
                return os.environ[m.group(1)]
            if m.group(2) is not None:
                return m.group(2)
            raise InvalidConfig(f"environment variable {m.group(1)} is not set")
        return _ENV_REF.sub(sub, value)
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    backends: dict[str, dict]
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    dataset_path: Path | None = None
    dataset_format: str = "bird"
    db_root: Path | None = None
    output_dir: Path = Path("runs")
    workers: int = 4
    prompt_dir: Path | None = None
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "RunConfig":
        base_dir = Path(base_dir)
        raw = interpolate_env(raw)

        def path(value):
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else base_dir / p

        backends = raw.get("backends")
        if not isinstance(backends, dict) or not backends:
            raise InvalidConfig("config needs a non-empty 'backends' object")
        bad = set(backends) - {r.value for r in ModelRole}
        if bad:
            raise InvalidConfig(f"unknown backend roles {sorted(bad)}")
        if ModelRole.SQL.value not in backends:
            raise InvalidConfig("a 'sql' backend is required")
        pipeline_raw = dict(raw.get("pipeline", {}))
        if "components" in raw:
            pipeline_raw["components"] = raw["components"]
        try:
            pipeline = PipelineConfig.from_dict(pipeline_raw)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad pipeline settings: {exc}") from exc
        dataset = raw.get("dataset") or {}
        return cls(
            backends=backends,
            pipeline=pipeline,
            dataset_path=path(dataset.get("path")),
            dataset_format=dataset.get("format", "bird"),
            db_root=path(raw.get("db_root")),
            output_dir=path(raw.get("output_dir", "runs")),
            workers=int(raw.get("workers", 4)),
            prompt_dir=path(raw.get("prompt_dir")),
            base_dir=base_dir,
        )

    def echo(self) -> dict:
        """Resolved settings embedded in every report; secrets left out."""
        backends = {}
        for role, cfg in sorted(self.backends.items()):
            backends[role] = {k: v for k, v in cfg.items() if k not in ("api_key", "script")}
            if "script" in cfg:
                backends[role]["script"] = cfg["script"] if isinstance(cfg["script"], str) else "<inline>"
        return {
            "backends": backends,
            "unified_model": ModelRole.CHAT.value not in self.backends,
            "pipeline": self.pipeline.to_dict(),
            "dataset_format": self.dataset_format,
        }


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw, path.parent)


def build_router(config: RunConfig) -> ModelRouter:
    """Bind backends per role; without a chat backend the SQL backend serves both."""
    router = ModelRouter()
    sql = router.bind(ModelRole.SQL, config.backends[ModelRole.SQL.value], config.base_dir)
    chat_cfg = config.backends.get(ModelRole.CHAT.value)
    if chat_cfg is None:
        router.bind(ModelRole.CHAT, sql)
    else:
        router.bind(ModelRole.CHAT, chat_cfg, config.base_dir)
    return router


def build_pipeline(config: RunConfig, pipeline_config: PipelineConfig | None = None) -> Pipeline:
    templates = load_templates(config.prompt_dir) if config.prompt_dir else None
    return Pipeline(build_router(config), config.db_root, pipeline_config or config.pipeline, templates)


# -- trace records -----------------------------------------------------------

def _trace_name(question_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", str(question_id)) + ".jsonl"


def evaluate_question(pipeline: Pipeline, example: DatasetExample) -> dict:
    """Run one question and return its trace record, judged against gold."""
    task = QuestionTask(example.question, example.db_id, example.hint, example.question_id)
    base = {
        "question_id": example.question_id,
        "db_id": example.db_id,
        "question": example.question,
        "hint": example.hint,
        "difficulty": example.difficulty,
        "gold_sql": example.gold_sql,
    }
    try:
        db_path = pipeline.database_path(example.db_id)
    except DatabaseUnavailable as exc:
        return {**base, "gold_valid": False, "gold_error": str(exc), "error": {"stage": "database", "message": str(exc)},
                "candidates": [], "predicted_sql": None, "executable": False, "correct": False,
                "selected_id": None, "selected_path": None}
    gold = execute(db_path, example.gold_sql, pipeline.config.exec_timeout, pipeline.config.row_limit)
    base["gold_valid"] = gold.ok and not gold.truncated
    base["gold_error"] = None if gold.ok else gold.error_message

    try:
        result = pipeline.run(task)
    except (StageError, DatabaseUnavailable) as exc:
        stage = exc.stage if isinstance(exc, StageError) else "database"
        log.error("%s failed at %s: %s", example.question_id, stage, exc)
        return {**base, "error": {"stage": stage, "message": str(exc)}, "candidates": [],
                "predicted_sql": None, "executable": False, "correct": False,
                "selected_id": None, "selected_path": None}

    record = {**base, **result.to_record()}
    record["error"] = None
    for cand, rec in zip(result.all_candidates, record["candidates"]):
        rec["executable"], rec["correct"] = judge_outcomes(cand.outcome, gold)
        if cand.outcome.truncated:
            rec["correct"] = False
    if result.selected is not None:
        chosen = record["candidates"][result.selected.id]
        record["executable"], record["correct"] = chosen["executable"], chosen["correct"]
        record["selected_path"] = result.selected.path.value
    else:
        # no executable candidate; report the first one as the best effort
        first = record["candidates"][0] if record["candidates"] else None
        record["executable"] = bool(first and first["executable"])
        record["correct"] = bool(first and first["correct"])
        record["selected_path"] = None
    if not base["gold_valid"]:
        record["correct"] = False
        for rec in record["candidates"]:
            rec["correct"] = False
    return record


def record_to_eval(record: dict) -> EvalRecord:
    outcomes = tuple(
        CandidateOutcome(c["sql"], PathKind(c["path"]), bool(c["executable"]), bool(c["correct"]))
        for c in record.get("candidates", [])
    )
    path = record.get("selected_path")
    return EvalRecord(
        question_id=str(record["question_id"]),
        gold_sql=record["gold_sql"],
        predicted_sql=record.get("predicted_sql"),
        executable=bool(record["executable"]),
        correct=bool(record["correct"]),
        selected_path=PathKind(path) if path else None,
        candidate_outcomes=outcomes,
        difficulty=record.get("difficulty"),
        gold_valid=bool(record.get("gold_valid", True)),
    )


class TraceStore:
    def __init__(self, directory: str | Path):
        self.dir = Path(directory)

    def path_for(self, question_id: str) -> Path:
        return self.dir / _trace_name(question_id)

    def done(self) -> set[str]:
        if not self.dir.is_dir():
            return set()
        return {p.name for p in self.dir.glob("*.jsonl")}

    def write(self, record: dict) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.path_for(record["question_id"])
        tmp = final.with_suffix(".jsonl.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, final)
        return final

    def read_all(self) -> list[dict]:
        if not self.dir.is_dir():
            raise CorruptTrace(self.dir, "trace directory does not exist")
        records = []
        for path in sorted(self.dir.glob("*.jsonl")):
            lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
            if len(lines) != 1:
                raise CorruptTrace(path, f"expected one record, found {len(lines)}")
            try:
                rec = json.loads(lines[0])
            except json.JSONDecodeError as exc:
                raise CorruptTrace(path, f"invalid JSON: {exc}") from exc
            missing = {"question_id", "gold_sql", "executable", "correct", "candidates"} - set(rec)
            if missing:
                raise CorruptTrace(path, f"missing fields {sorted(missing)}")
            records.append(rec)
        return records


def report_from_traces(trace_dir: str | Path, run_dir: str | Path | None = None) -> Report:
    """Recompute every metric from trace records alone."""
    trace_dir = Path(trace_dir)
    run_dir = Path(run_dir) if run_dir else trace_dir.parent
    config = None
    config_path = run_dir / RUN_CONFIG_FILE
    if config_path.exists():
        config = json.loads(config_path.read_text(encoding="utf-8"))
    records = TraceStore(trace_dir).read_all()
    if not records:
        raise CorruptTrace(trace_dir, "no trace records")
    try:
        evals = [record_to_eval(r) for r in records]
    except (KeyError, ValueError) as exc:
        raise CorruptTrace(trace_dir, f"bad record: {exc}") from exc
    return compute_report(evals, config=config)


def format_summary(report: Report) -> str:
    lines = [
        f"questions      {report.total} (excluded {report.excluded})",
        f"EX             {report.ex_percent:.2f}%",
        f"EP             {report.ep_percent:.2f}%",
        "",
        "correct answers by path",
    ]
    n_correct = sum(report.path_distribution.values())
    for path, count in report.path_distribution.items():
        share = 100.0 * count / n_correct if n_correct else 0.0
        lines.append(f"  {path:<14} {count:>5}  {share:6.2f}%")
    if report.top_n:
        lines += ["", "cumulative accuracy"]
        lines += [f"  top-{k:<3} {v:6.2f}%" for k, v in report.top_n.items()]
    if report.per_difficulty:
        lines += ["", "by difficulty"]
        for label, row in report.per_difficulty.items():
            lines.append(f"  {label:<12} n={row['total']:<5} EX {row['ex_percent']:6.2f}%  EP {row['ep_percent']:6.2f}%")
    return "\n".join(lines) + "\n"


def write_report(report: Report, run_dir: Path) -> None:
    (run_dir / REPORT_FILE).write_text(report.to_json(), encoding="utf-8")
    (run_dir / SUMMARY_FILE).write_text(format_summary(report), encoding="utf-8")


def run_bench(config: RunConfig, run_dir: str | Path | None = None,
              pipeline_config: PipelineConfig | None = None,
              examples: Sequence[DatasetExample] | None = None) -> Report:
    """Run (or resume) a benchmark and write traces plus report into ``run_dir``."""
    run_dir = Path(run_dir or config.output_dir)
    pipeline_config = pipeline_config or config.pipeline
    if examples is None:
        if config.dataset_path is None:
            raise InvalidConfig("config has no dataset path")
        examples = load_dataset(config.dataset_path, config.dataset_format)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = config.echo()
    echo["pipeline"] = pipeline_config.to_dict()
    (run_dir / RUN_CONFIG_FILE).write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    store = TraceStore(run_dir / "traces")
    finished = store.done()
    pending = [ex for ex in examples if _trace_name(ex.question_id) not in finished]
    if len(pending) < len(examples):
        log.info("resuming: %d of %d questions already traced", len(examples) - len(pending), len(examples))
    if pending:
        pipeline = build_pipeline(config, pipeline_config)

        def work(example):
            store.write(evaluate_question(pipeline, example))

        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
            for fut in [pool.submit(work, ex) for ex in pending]:
                fut.result()
    report = report_from_traces(store.dir, run_dir)
    write_report(report, run_dir)
    return report


def components_label(components: Components) -> str:
    off = [name for name in COMPONENT_NAMES if not getattr(components, name)]
    return "full" if not off else "wo-" + "-".join(off)


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "-", label).strip("-")


def run_ablation(config: RunConfig, axis: str, run_dir: str | Path | None = None,
                 examples: Sequence[DatasetExample] | None = None) -> list[dict]:
    """One resumable bench per setting on ``axis``; writes the sweep table."""
    out = Path(run_dir) if run_dir else config.output_dir / f"ablate-{axis}"
    if examples is None:
        if config.dataset_path is None:
            raise InvalidConfig("config has no dataset path")
        examples = load_dataset(config.dataset_path, config.dataset_format)

    def evaluate(dataset, label, pipeline_config):
        return run_bench(config, out / _slug(label), pipeline_config, dataset)

    rows = sweep(examples, axis, config.pipeline, evaluate)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    (out / "table.tsv").write_text(format_table(rows), encoding="utf-8")
    return rows


def format_table(rows: list[dict]) -> str:
    cols = ["setting", "pool", "selection_rounds", "ex_percent", "ep_percent"]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
