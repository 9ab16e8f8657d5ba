"""Read-only SQL execution and result-set comparison."""

from __future__ import annotations

import math
import sqlite3
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .errors import DatabaseNotFound, IncomparableShapes

DEFAULT_TIMEOUT = 30.0
DEFAULT_ROW_LIMIT = 10_000
NUMERIC_TOLERANCE = 1e-6

# Only reads are authorized; anything else fails with "not authorized".
_ALLOWED_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    sqlite3.SQLITE_FUNCTION,
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}


class ExecStatus(str, Enum):
    SUCCESS = "success"
    ERROR = "error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ExecutionOutcome:
    status: ExecStatus
    rows: tuple[tuple, ...] = ()
    columns: tuple[str, ...] = ()
    error_message: str = ""
    elapsed: float = 0.0
    truncated: bool = False

    @property
    def ok(self) -> bool:
        return self.status is ExecStatus.SUCCESS

    @classmethod
    def error(cls, message: str, elapsed: float = 0.0) -> "ExecutionOutcome":
        return cls(ExecStatus.ERROR, error_message=message or "unknown error", elapsed=elapsed)

    def table(self) -> "ResultTable":
        return ResultTable(self.columns, self.rows)


@dataclass(frozen=True)
class ResultTable:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __post_init__(self):
        width = len(self.columns)
        for row in self.rows:
            if len(row) != width:
                raise ValueError(f"row {row!r} does not have {width} values")


def _authorizer(action, *_):
    return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS else sqlite3.SQLITE_DENY


def execute(db_path: str | Path, sql: str, timeout: float = DEFAULT_TIMEOUT,
            row_limit: int = DEFAULT_ROW_LIMIT) -> ExecutionOutcome:
    """Run one statement against a read-only connection.

    Engine errors come back in-band with the message untouched, since the
    correction prompt quotes it. Only a missing database file raises.
    """
    path = Path(db_path)
    if not path.is_file():
        raise DatabaseNotFound(str(path))
    if not sql or not sql.strip():
        return ExecutionOutcome.error("empty SQL statement")

    start = time.monotonic()
    deadline = start + timeout
    timed_out = False

    def check_deadline():
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    conn = sqlite3.connect(f"{path.resolve().as_uri()}?mode=ro", uri=True, check_same_thread=False)
    try:
        conn.execute("PRAGMA query_only = ON")
        conn.set_authorizer(_authorizer)
        conn.set_progress_handler(check_deadline, 1000)
        # keep TEXT that is not valid UTF-8 from aborting the fetch
        conn.text_factory = lambda b: b.decode("utf-8", errors="replace")
        try:
            cur = conn.execute(sql)
            columns = tuple(d[0] for d in cur.description or ())
            rows = cur.fetchmany(row_limit)
            # drain the rest so an unbounded query hits the deadline
            truncated = False
            while cur.fetchmany(1000):
                truncated = True
        except (sqlite3.Error, sqlite3.Warning) as exc:
            elapsed = time.monotonic() - start
            if timed_out:
                return ExecutionOutcome(ExecStatus.TIMEOUT, error_message=f"timeout after {timeout:g}s",
                                        elapsed=elapsed)
            return ExecutionOutcome.error(str(exc) or type(exc).__name__, elapsed)
        except (ValueError, OverflowError) as exc:
            return ExecutionOutcome.error(str(exc) or type(exc).__name__, time.monotonic() - start)
        return ExecutionOutcome(
            ExecStatus.SUCCESS,
            rows=tuple(tuple(r) for r in rows),
            columns=columns,
            elapsed=time.monotonic() - start,
            truncated=truncated,
        )
    finally:
        conn.close()


def _norm(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def _values_match(a, b) -> bool:
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) \
            and not isinstance(a, bool) and not isinstance(b, bool):
        if isinstance(a, float) and math.isnan(a) or isinstance(b, float) and math.isnan(b):
            return False
        return abs(a - b) <= NUMERIC_TOLERANCE
    return a == b


def _rows_match(a: Sequence, b: Sequence) -> bool:
    return all(_values_match(x, y) for x, y in zip(a, b))


def _covers(source: set, target: list) -> bool:
    """Every row in ``source`` has a tolerant match in ``target``."""
    exact = set(target)
    for row in source:
        if row in exact:
            continue
        if not any(_rows_match(row, other) for other in target):
            return False
    return True


def results_match(a: ResultTable, b: ResultTable) -> bool:
    """Set equality of rows, columns compared by position.

    Duplicates collapse and order is ignored. Numbers compare within an
    absolute tolerance of 1e-6 regardless of int/real storage; text compares
    exactly.
    """
    if len(a.columns) != len(b.columns):
        raise IncomparableShapes(f"arity {len(a.columns)} vs {len(b.columns)}")
    rows_a = {tuple(_norm(v) for v in r) for r in a.rows}
    rows_b = {tuple(_norm(v) for v in r) for r in b.rows}
    if rows_a == rows_b:
        return True
    return _covers(rows_a, list(rows_b)) and _covers(rows_b, list(rows_a))
