"""Benchmark datasets and execution-based metrics.

EX counts questions whose predicted query returns the gold result set; EP
counts questions whose predicted query executes at all. Both are percentages
of the questions with a valid gold query.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import IncomparableShapes, MalformedDataset
from .executor import DEFAULT_ROW_LIMIT, DEFAULT_TIMEOUT, ExecutionOutcome, execute, results_match
from .pipeline import COMPONENT_NAMES, PathKind, PipelineConfig

log = logging.getLogger(__name__)

DEFAULT_TOP_N = (1, 3, 5, 7)
CANDIDATE_AXIS = (1, 2, 3, 4, 5, 6)
ROUNDS_AXIS = (1, 3, 5, 7)


@dataclass(frozen=True)
class DatasetExample:
    question_id: str
    db_id: str
    question: str
    gold_sql: str
    hint: str | None = None
    difficulty: str | None = None


_FIELDS = {
    # format -> (question text, gold SQL, hint)
    "bird": ("question", "SQL", "evidence"),
    "spider": ("question", "query", None),
}


def load_dataset(path: str | Path, format: str = "bird") -> list[DatasetExample]:
    """Read a BIRD- or Spider-layout JSON file."""
    if format not in _FIELDS:
        raise ValueError(f"unknown dataset format {format!r}")
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedDataset(-1, "<file>", f"is not valid JSON ({exc})") from exc
    if not isinstance(entries, list):
        raise MalformedDataset(-1, "<file>", "is not a JSON list")
    q_key, sql_key, hint_key = _FIELDS[format]
    out = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise MalformedDataset(i, "<entry>", "is not an object")
        for key in ("db_id", q_key, sql_key):
            if not isinstance(entry.get(key), str) or not entry[key].strip():
                raise MalformedDataset(i, key)
        hint = entry.get(hint_key) if hint_key else None
        qid = entry.get("question_id", i)
        out.append(DatasetExample(
            question_id=str(qid),
            db_id=entry["db_id"],
            question=entry[q_key],
            gold_sql=entry[sql_key],
            hint=hint or None,
            difficulty=entry.get("difficulty"),
        ))
    return out


def judge_outcomes(predicted: ExecutionOutcome, gold: ExecutionOutcome) -> tuple[bool, bool]:
    """``(executable, correct)`` from two execution outcomes."""
    executable = predicted.ok
    if not executable or not gold.ok:
        return executable, False
    try:
        return True, results_match(predicted.table(), gold.table())
    except IncomparableShapes:
        return True, False


def judge(predicted_sql: str | None, gold_sql: str, db_path: str | Path,
          timeout: float = DEFAULT_TIMEOUT, row_limit: int = DEFAULT_ROW_LIMIT) -> tuple[bool, bool]:
    if not predicted_sql:
        return False, False
    gold = execute(db_path, gold_sql, timeout, row_limit)
    pred = execute(db_path, predicted_sql, timeout, row_limit)
    return judge_outcomes(pred, gold)


@dataclass(frozen=True)
class CandidateOutcome:
    sql: str
    path: PathKind
    executable: bool
    correct: bool


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    gold_sql: str
    predicted_sql: str | None
    executable: bool
    correct: bool
    selected_path: PathKind | None = None
    candidate_outcomes: tuple[CandidateOutcome, ...] = ()
    difficulty: str | None = None
    gold_valid: bool = True

    def __post_init__(self):
        if self.correct and not self.executable:
            raise ValueError("a correct prediction must be executable")


@dataclass
class Report:
    total: int
    ex_percent: float
    ep_percent: float
    excluded: int = 0
    path_distribution: dict[str, int] = field(default_factory=dict)
    per_difficulty: dict[str, dict] | None = None
    top_n: dict[int, float] | None = None
    config: dict | None = None

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "excluded": self.excluded,
            "ex_percent": self.ex_percent,
            "ep_percent": self.ep_percent,
            "path_distribution": dict(self.path_distribution),
            "per_difficulty": self.per_difficulty,
            "top_n": None if self.top_n is None else {str(k): v for k, v in self.top_n.items()},
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _pct(count: int, total: int) -> float:
    return round(100.0 * count / total, 4) if total else 0.0


def top_n(records: Sequence[EvalRecord], n: int) -> float:
    """Percent of questions with a correct query among their first ``n`` candidates."""
    valid = [r for r in records if r.gold_valid]
    if n < 1:
        raise ValueError("n must be >= 1")
    hits = sum(any(c.correct for c in r.candidate_outcomes[:n]) for r in valid)
    return _pct(hits, len(valid))


def compute_report(records: Iterable[EvalRecord], top_ns: Sequence[int] = DEFAULT_TOP_N,
                   config: dict | None = None) -> Report:
    """Aggregate EX/EP, per-path attribution of correct answers and Top-N.

    Records whose gold query failed are left out of N and counted in
    ``excluded``.
    """
    records = sorted(records, key=lambda r: r.question_id)
    if not records:
        raise ValueError("compute_report needs at least one record")
    valid = [r for r in records if r.gold_valid]
    excluded = len(records) - len(valid)
    if excluded:
        log.warning("%d question(s) excluded: gold SQL did not execute", excluded)
    n = len(valid)
    correct = sum(r.correct for r in valid)
    executable = sum(r.executable for r in valid)

    distribution = {p.value: 0 for p in PathKind}
    for r in valid:
        if r.correct and r.selected_path is not None:
            distribution[r.selected_path.value] += 1

    per_difficulty = None
    labels = sorted({r.difficulty for r in valid if r.difficulty})
    if labels:
        per_difficulty = {}
        for label in labels:
            group = [r for r in valid if r.difficulty == label]
            per_difficulty[label] = {
                "total": len(group),
                "ex_percent": _pct(sum(r.correct for r in group), len(group)),
                "ep_percent": _pct(sum(r.executable for r in group), len(group)),
            }

    tops = None
    if top_ns and any(r.candidate_outcomes for r in valid):
        tops = {k: top_n(valid, k) for k in top_ns}

    report = Report(
        total=n, ex_percent=_pct(correct, n), ep_percent=_pct(executable, n), excluded=excluded,
        path_distribution=distribution, per_difficulty=per_difficulty, top_n=tops, config=config,
    )
    assert report.ex_percent <= report.ep_percent
    return report


def sweep_settings(axis: str, base: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    """``(label, config)`` for each point on a sweep axis, all else fixed."""
    if axis == "candidates":
        return [(f"pool={len(PathKind) * k}", replace(base, candidates_per_path=k)) for k in CANDIDATE_AXIS]
    if axis == "rounds":
        return [(f"rounds={r}", replace(base, selection_rounds=r)) for r in ROUNDS_AXIS]
    if axis == "components":
        rows = [("full", base)]
        for name in COMPONENT_NAMES:
            rows.append((f"w/o {name}", replace(base, components=base.components.without(name))))
        return rows
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(dataset: Sequence[DatasetExample], axis: str, base: PipelineConfig,
          evaluate: Callable[[Sequence[DatasetExample], str, PipelineConfig], Report]) -> list[dict]:
    """One evaluation per setting on ``axis``; returns table rows of (setting, EX, EP)."""
    rows = []
    for label, config in sweep_settings(axis, base):
        report = evaluate(dataset, label, config)
        rows.append({
            "setting": label,
            "candidates_per_path": config.effective_candidates_per_path,
            "pool": config.pool_size,
            "selection_rounds": config.selection_rounds,
            "ex_percent": report.ex_percent,
            "ep_percent": report.ep_percent,
            "total": report.total,
        })
    return rows
