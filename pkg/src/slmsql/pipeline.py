"""Per-question orchestration: prune, link, generate, correct, select.

Reasoning stages (pruning, linking, selection) go to the chat role and
SQL-writing stages (generation, correction) to the SQL role by default; the
mapping lives in :attr:`PipelineConfig.stage_role_map`.
"""

from __future__ import annotations

import logging
import re
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

from . import extraction
from .backend import GenerationRequest, ModelRole, ModelRouter, SamplingParams
from .errors import BackendError, DatabaseNotFound, DatabaseUnavailable, NotADatabase, StageError
from .executor import DEFAULT_ROW_LIMIT, DEFAULT_TIMEOUT, ExecStatus, ExecutionOutcome, execute
from .prompts import PromptTemplate, StageKind, render
from .schema import DatabaseSchema, load_schema, quote_identifier, render_ddl

log = logging.getLogger(__name__)

NO_SQL_FOUND = "no SQL found"


class PathKind(str, Enum):
    PRUNED_LINKED = "pruned_linked"
    FULL_LINKED = "full_linked"
    PRUNED_ONLY = "pruned_only"
    FULL_ONLY = "full_only"

    @property
    def pruned(self) -> bool:
        return self in (PathKind.PRUNED_LINKED, PathKind.PRUNED_ONLY)

    @property
    def linked(self) -> bool:
        return self in (PathKind.PRUNED_LINKED, PathKind.FULL_LINKED)


DEFAULT_STAGE_ROLES: dict[StageKind, ModelRole] = {
    StageKind.PRUNING: ModelRole.CHAT,
    StageKind.LINKING: ModelRole.CHAT,
    StageKind.GENERATION_WITH_LINKING: ModelRole.SQL,
    StageKind.GENERATION_WITHOUT_LINKING: ModelRole.SQL,
    StageKind.CORRECTION: ModelRole.SQL,
    StageKind.SELECTION_QUERY_ONLY: ModelRole.CHAT,
    StageKind.SELECTION_WITH_RESULTS: ModelRole.CHAT,
}


@dataclass(frozen=True)
class Components:
    """Stage switches; each ``False`` is one row of the component ablation."""

    pruning: bool = True
    linking: bool = True
    multi_candidate: bool = True
    correction: bool = True
    selection: bool = True

    def without(self, name: str) -> "Components":
        return replace(self, **{name: False})


COMPONENT_NAMES = tuple(f.name for f in fields(Components))


@dataclass(frozen=True)
class PipelineConfig:
    candidates_per_path: int = 4
    correction_candidates: int = 2
    selection_rounds: int = 3
    sampling: SamplingParams = field(default_factory=SamplingParams)
    result_preview_rows: int = 5
    result_preview_chars: int = 512
    answer_patterns: tuple[str, ...] = extraction.DEFAULT_ANSWER_PATTERNS
    stage_role_map: Mapping[StageKind, ModelRole] = field(default_factory=lambda: dict(DEFAULT_STAGE_ROLES))
    components: Components = field(default_factory=Components)
    exec_timeout: float = DEFAULT_TIMEOUT
    row_limit: int = DEFAULT_ROW_LIMIT
    generation_max_tokens: int = 512
    reasoning_max_tokens: int = 768

    def __post_init__(self):
        if self.candidates_per_path < 1 or self.correction_candidates < 0 or self.selection_rounds < 1:
            raise ValueError("candidate sizes and selection rounds must be positive")
        missing = set(StageKind) - set(StageKind(s) for s in self.stage_role_map)
        if missing:
            raise ValueError(f"stage_role_map lacks {sorted(s.value for s in missing)}")

    @property
    def effective_candidates_per_path(self) -> int:
        return self.candidates_per_path if self.components.multi_candidate else 1

    @property
    def pool_size(self) -> int:
        return len(PathKind) * self.effective_candidates_per_path

    def role_for(self, stage: StageKind) -> ModelRole:
        for key, role in self.stage_role_map.items():
            if StageKind(key) is stage:
                return ModelRole(role)
        raise KeyError(stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["answer_patterns"] = list(self.answer_patterns)
        d["stage_role_map"] = {StageKind(k).value: ModelRole(v).value for k, v in self.stage_role_map.items()}
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        data = dict(data)
        if "sampling" in data and isinstance(data["sampling"], Mapping):
            data["sampling"] = SamplingParams(**data["sampling"])
        if "components" in data and isinstance(data["components"], Mapping):
            data["components"] = Components(**data["components"])
        if "stage_role_map" in data:
            roles = dict(DEFAULT_STAGE_ROLES)
            roles.update({StageKind(k): ModelRole(v) for k, v in data["stage_role_map"].items()})
            data["stage_role_map"] = roles
        if "answer_patterns" in data:
            data["answer_patterns"] = tuple(data["answer_patterns"])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline settings: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class QuestionTask:
    question: str
    db_id: str
    hint: str | None = None
    question_id: str | None = None

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError("question must be non-empty")


@dataclass(frozen=True)
class Candidate:
    id: int
    sql: str
    path: PathKind
    outcome: ExecutionOutcome
    parent_id: int | None = None
    attempt: int | None = None

    @property
    def origin(self) -> str:
        return "initial" if self.parent_id is None else "corrected"

    @property
    def executable(self) -> bool:
        return self.outcome.ok

    def to_record(self, include_timings: bool = True) -> dict:
        rec = {
            "id": self.id,
            "sql": self.sql,
            "path": self.path.value,
            "origin": self.origin,
            "parent_id": self.parent_id,
            "attempt": self.attempt,
            "status": self.outcome.status.value,
            "error_message": self.outcome.error_message or None,
            "truncated": self.outcome.truncated,
        }
        if include_timings:
            rec["elapsed"] = round(self.outcome.elapsed, 6)
        return rec


@dataclass(frozen=True)
class SelectionResult:
    candidate: Candidate
    votes: tuple[int | None, ...]
    mode: str  # single | model | fallback | feq


@dataclass
class PipelineResult:
    task: QuestionTask
    selected: Candidate | None
    executables: list[Candidate]
    all_candidates: list[Candidate]
    pruned_tables: list[str]
    linked_columns: list[tuple[str, str]]
    stage_timings: dict[str, float] = field(default_factory=dict)
    selection_votes: list[int | None] = field(default_factory=list)
    selection_mode: str = "none"
    pruning_fallback: bool = False
    linking_empty: bool = False
    path_failures: dict[str, str] = field(default_factory=dict)

    @property
    def predicted_sql(self) -> str | None:
        """Selected SQL, else the first candidate's SQL as a best-effort answer."""
        if self.selected is not None:
            return self.selected.sql
        return self.all_candidates[0].sql if self.all_candidates else None

    def to_record(self, include_timings: bool = True) -> dict:
        rec = {
            "question_id": self.task.question_id,
            "db_id": self.task.db_id,
            "question": self.task.question,
            "hint": self.task.hint,
            "pruned_tables": list(self.pruned_tables),
            "pruning_fallback": self.pruning_fallback,
            "linked_columns": [f"{t}.{c}" for t, c in self.linked_columns],
            "linking_empty": self.linking_empty,
            "path_failures": dict(self.path_failures),
            "candidates": [c.to_record(include_timings) for c in self.all_candidates],
            "selection_votes": list(self.selection_votes),
            "selection_mode": self.selection_mode,
            "selected_id": self.selected.id if self.selected else None,
            "predicted_sql": self.predicted_sql,
        }
        if include_timings:
            rec["timings"] = {k: round(v, 6) for k, v in self.stage_timings.items()}
        return rec


def normalize_sql(sql: str) -> str:
    return re.sub(r"\s+", " ", sql).strip()


def mode_vote(votes) -> int | None:
    """Most frequent non-None vote; ties go to the vote cast earliest."""
    valid = [v for v in votes if v is not None]
    if not valid:
        return None
    counts = Counter(valid)
    top = max(counts.values())
    return next(v for v in valid if counts[v] == top)


def format_linked_columns(linked) -> str:
    return "\n".join(f"{quote_identifier(t)}.{quote_identifier(c)}" for t, c in linked)


def _format_value(value) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, bytes):
        return f"<{len(value)} bytes>"
    return str(value)


def format_preview(outcome: ExecutionOutcome, max_rows: int) -> str:
    lines = [" | ".join(outcome.columns)]
    lines += [" | ".join(_format_value(v) for v in row) for row in outcome.rows[:max_rows]]
    return "\n".join(lines)


class Pipeline:
    """Runs every stage for one question at a time; safe to share across threads."""

    def __init__(self, router: ModelRouter, db_root: str | Path | None = None,
                 config: PipelineConfig | None = None,
                 templates: Mapping[StageKind, PromptTemplate] | None = None):
        self.router = router
        self.db_root = Path(db_root) if db_root is not None else None
        self.config = config or PipelineConfig()
        self.templates = templates
        self._schemas: dict[str, tuple[Path, DatabaseSchema]] = {}
        self._lock = threading.Lock()

    # -- database access -------------------------------------------------

    def database_path(self, db_id: str) -> Path:
        if self.db_root is None:
            raise DatabaseUnavailable("no database root configured")
        for name in (f"{db_id}.sqlite", f"{db_id}.db"):
            path = self.db_root / db_id / name
            if path.is_file():
                return path
        raise DatabaseUnavailable(f"no database for db_id {db_id!r} under {self.db_root}")

    def load(self, db_id: str) -> tuple[Path, DatabaseSchema]:
        with self._lock:
            if db_id in self._schemas:
                return self._schemas[db_id]
        path = self.database_path(db_id)
        try:
            schema = load_schema(path, db_id)
        except (DatabaseNotFound, NotADatabase) as exc:
            raise DatabaseUnavailable(str(exc)) from exc
        with self._lock:
            self._schemas[db_id] = (path, schema)
        return path, schema

    # -- model calls -----------------------------------------------------

    def _ask(self, stage: StageKind, variables: dict, sampling: SamplingParams, tag: str | None = None):
        prompt = render(stage, variables, self.templates)
        request = GenerationRequest(
            role=self.config.role_for(stage), system=prompt.system, user=prompt.user,
            sampling=sampling, stage=tag or stage.value,
        )
        try:
            return self.router.generate(request)
        except BackendError as exc:
            raise StageError(tag or stage.value, exc) from exc

    def _sampling(self, n: int) -> SamplingParams:
        return replace(self.config.sampling, greedy=False, num_candidates=n,
                       max_tokens=self.config.generation_max_tokens)

    def _base_vars(self, task: QuestionTask, schema: DatabaseSchema) -> dict:
        return {"database_name": schema.db_id, "question": task.question, "hint": task.hint}

    # -- stages ----------------------------------------------------------

    def run_pruning(self, task: QuestionTask, schema: DatabaseSchema) -> tuple[list[str], bool]:
        """Tables the chat model names as relevant; falls back to all tables.

        Returns ``(tables, fell_back)``.
        """
        if not schema.tables:
            raise ValueError("cannot prune an empty schema")
        variables = self._base_vars(task, schema)
        variables["database_schema"] = render_ddl(schema)
        variables["tables"] = ", ".join(schema.table_names)
        [completion] = self._ask(StageKind.PRUNING, variables,
                                 SamplingParams.greedy_decoding(self.config.reasoning_max_tokens))
        tables = extraction.extract_tables(completion.text, schema)
        if not tables:
            return schema.table_names, True
        return tables, False

    def run_linking(self, task: QuestionTask, schema: DatabaseSchema) -> tuple[list[tuple[str, str]], bool]:
        """Columns the chat model names as relevant, found against the full schema.

        Returns ``(columns, empty)``.
        """
        variables = self._base_vars(task, schema)
        variables["schema"] = render_ddl(schema)
        [completion] = self._ask(StageKind.LINKING, variables,
                                 SamplingParams.greedy_decoding(self.config.reasoning_max_tokens))
        columns = extraction.extract_columns(completion.text, schema)
        return columns, not columns

    def _path_ddl(self, schema: DatabaseSchema, path: PathKind, pruned) -> str:
        return render_ddl(schema, pruned if path.pruned else None)

    def _make_candidate(self, cid: int, text: str, path: PathKind, db_path: Path,
                        parent_id=None, attempt=None) -> Candidate:
        sql = extraction.extract_sql(text)
        if sql is None:
            return Candidate(cid, text.strip(), path, ExecutionOutcome.error(NO_SQL_FOUND), parent_id, attempt)
        outcome = execute(db_path, sql, self.config.exec_timeout, self.config.row_limit)
        return Candidate(cid, sql, path, outcome, parent_id, attempt)

    def generate_candidates(self, task: QuestionTask, schema: DatabaseSchema, pruned, linked,
                            db_path: Path, failures: dict | None = None) -> list[Candidate]:
        """Four prompt variants, ``candidates_per_path`` SQL completions each, executed."""
        schema.canonical_tables(pruned)  # raises UnknownTable
        use_linking = self.config.components.linking
        n = self.config.effective_candidates_per_path
        candidates: list[Candidate] = []
        errors = []
        for path in PathKind:
            variables = self._base_vars(task, schema)
            variables["database_schema"] = self._path_ddl(schema, path, pruned)
            if path.linked and use_linking:
                stage = StageKind.GENERATION_WITH_LINKING
                variables["schema_linking"] = format_linked_columns(linked)
            else:
                stage = StageKind.GENERATION_WITHOUT_LINKING
            try:
                completions = self._ask(stage, variables, self._sampling(n), tag=f"generation/{path.value}")
            except StageError as exc:
                log.warning("%s: path %s failed: %s", task.question_id, path.value, exc)
                errors.append(exc)
                if failures is not None:
                    failures[path.value] = str(exc.cause)
                continue
            for c in completions:
                candidates.append(self._make_candidate(len(candidates), c.text, path, db_path))
        if len(errors) == len(PathKind):
            raise errors[0]
        return candidates

    def correct(self, candidate: Candidate, task: QuestionTask, schema: DatabaseSchema, pruned,
                db_path: Path, next_id: int) -> list[Candidate]:
        """Two repair attempts fed the engine's error message verbatim."""
        if candidate.outcome.status is ExecStatus.SUCCESS:
            raise ValueError("only failed candidates are corrected")
        k = self.config.correction_candidates
        if k == 0:
            return []
        variables = {
            "schema": self._path_ddl(schema, candidate.path, pruned),
            "question": task.question,
            "hint": task.hint,
            "prev_ans": candidate.sql,
            "errorMsg": candidate.outcome.error_message,
        }
        completions = self._ask(StageKind.CORRECTION, variables, self._sampling(k))
        return [
            self._make_candidate(next_id + i, c.text, candidate.path, db_path,
                                 parent_id=candidate.id, attempt=i + 1)
            for i, c in enumerate(completions)
        ]

    def _render_queries(self, survivors: list[Candidate], with_results: bool) -> str:
        blocks = []
        for i, cand in enumerate(survivors, start=1):
            block = f"Index {i}:\n{cand.sql}"
            if with_results:
                block += "\nResult:\n" + format_preview(cand.outcome, self.config.result_preview_rows)
            blocks.append(block)
        return "\n\n".join(blocks)

    def _preview_fits(self, cand: Candidate) -> bool:
        out = cand.outcome
        if out.truncated or len(out.rows) > self.config.result_preview_rows:
            return False
        return len(format_preview(out, self.config.result_preview_rows)) <= self.config.result_preview_chars

    def select(self, task: QuestionTask, schema: DatabaseSchema, executables: list[Candidate]) -> SelectionResult:
        """Majority vote over ``selection_rounds`` independent chat judgments."""
        if not executables:
            raise ValueError("select needs at least one executable candidate")
        if len(executables) == 1:
            return SelectionResult(executables[0], (), "single")
        if not self.config.components.selection:
            return SelectionResult(executables[0], (), "feq")

        survivors, seen = [], set()
        for cand in sorted(executables, key=lambda c: c.id):
            key = normalize_sql(cand.sql)
            if key not in seen:
                seen.add(key)
                survivors.append(cand)
        if len(survivors) == 1:
            return SelectionResult(survivors[0], (), "single")

        with_results = all(self._preview_fits(c) for c in survivors)
        stage = StageKind.SELECTION_WITH_RESULTS if with_results else StageKind.SELECTION_QUERY_ONLY
        variables = self._base_vars(task, schema)
        variables["database_schema"] = render_ddl(schema)
        variables["queries"] = self._render_queries(survivors, with_results)
        sampling = replace(self.config.sampling, greedy=False, num_candidates=1,
                           max_tokens=self.config.reasoning_max_tokens)
        votes: list[int | None] = []
        for _ in range(self.config.selection_rounds):
            [completion] = self._ask(stage, variables, sampling, tag="selection")
            index = extraction.extract_index(completion.text, len(survivors))
            votes.append(None if index is None else survivors[index - 1].id)
        winner = mode_vote(votes)
        if winner is None:
            return SelectionResult(executables[0], tuple(votes), "fallback")
        by_id = {c.id: c for c in survivors}
        return SelectionResult(by_id[winner], tuple(votes), "model")

    # -- whole question --------------------------------------------------

    def run(self, task: QuestionTask) -> PipelineResult:
        db_path, schema = self.load(task.db_id)
        if not schema.tables:
            raise DatabaseUnavailable(f"database {task.db_id!r} has no tables")
        comp = self.config.components
        timings: dict[str, float] = {}

        t = time.monotonic()
        if comp.pruning:
            pruned, pruning_fallback = self.run_pruning(task, schema)
        else:
            pruned, pruning_fallback = schema.table_names, False
        timings["pruning"] = time.monotonic() - t

        t = time.monotonic()
        if comp.linking:
            linked, linking_empty = self.run_linking(task, schema)
        else:
            linked, linking_empty = [], False
        timings["linking"] = time.monotonic() - t

        t = time.monotonic()
        failures: dict[str, str] = {}
        candidates = self.generate_candidates(task, schema, pruned, linked, db_path, failures)
        timings["generation"] = time.monotonic() - t

        t = time.monotonic()
        if comp.correction:
            for parent in list(candidates):
                if parent.executable:
                    continue
                candidates.extend(self.correct(parent, task, schema, pruned, db_path, len(candidates)))
        timings["correction"] = time.monotonic() - t

        executables = [c for c in candidates if c.executable]
        t = time.monotonic()
        selected, votes, mode = None, (), "none"
        if executables:
            choice = self.select(task, schema, executables)
            selected, votes, mode = choice.candidate, choice.votes, choice.mode
        timings["selection"] = time.monotonic() - t

        return PipelineResult(
            task=task, selected=selected, executables=executables, all_candidates=candidates,
            pruned_tables=list(pruned), linked_columns=list(linked), stage_timings=timings,
            selection_votes=list(votes), selection_mode=mode, pruning_fallback=pruning_fallback,
            linking_empty=linking_empty, path_failures=failures,
        )
