"""Salvage structured results from unconstrained model output.

Small models are bad at following output formats, so nothing here demands
one. Table and column names are found by lexical matching against the
schema; SQL, answers and selection indices by tolerant pattern matching.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .schema import DatabaseSchema, resolve_identifier

DEFAULT_ANSWER_PATTERNS = ("answer is", "Answer:")


class ExtractionKind(str, Enum):
    TABLES = "tables"
    COLUMNS = "columns"
    SQL = "sql"
    ANSWER = "answer"
    INDEX = "index"


@dataclass(frozen=True)
class ExtractionOutcome:
    kind: ExtractionKind
    values: tuple[str, ...]
    matched_span: tuple[int, int] | None = None


def _mention_pattern(name: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(name) + r"(?!\w)", re.IGNORECASE)


def extract_tables(text: str, schema: DatabaseSchema) -> list[str]:
    """Every schema table mentioned in ``text``, in catalog order."""
    if not text:
        return []
    return [t.name for t in schema.tables if _mention_pattern(t.name).search(text)]


_QUOTED_OR_WORD = r"""(`[^`\n]+`|"[^"\n]+"|\[[^\]\n]+\]|\w+)"""
_QUALIFIED_MENTION = re.compile(_QUOTED_OR_WORD + r"\s*\.\s*" + _QUOTED_OR_WORD)


def extract_columns(text: str, schema: DatabaseSchema) -> list[tuple[str, str]]:
    """``table.column`` mentions plus unambiguous bare column mentions.

    Qualified mentions whose table part names a real table are consumed
    before the bare scan, so ``Employees.bogus`` cannot leak a bare match.
    Qualifiers that are not tables (SQL aliases like ``T1.salary``) are left
    for the bare scan.
    """
    if not text:
        return []
    found: set[tuple[str, str]] = set()
    chars = list(text)
    for m in _QUALIFIED_MENTION.finditer(text):
        qualifier = resolve_identifier(schema, m.group(1))
        if qualifier is None or qualifier[1] is not None:
            continue
        hit = resolve_identifier(schema, f"{m.group(1)}.{m.group(2)}")
        if hit is not None and hit[1] is not None:
            found.add(hit)
        chars[m.start():m.end()] = " " * (m.end() - m.start())
    rest = "".join(chars)

    for owners in schema.column_owners.values():
        if len(owners) != 1:
            continue
        table, column = owners[0]
        if _mention_pattern(column).search(rest):
            found.add((table, column))

    ordered = []
    for t in schema.tables:
        for c in t.columns:
            if (t.name, c.name) in found:
                ordered.append((t.name, c.name))
    return ordered


_FENCE = re.compile(r"```[ \t]*([A-Za-z]*)[ \t]*\n?(.*?)```", re.DOTALL)
_SQL_START = re.compile(
    r"\bSELECT\b|\bWITH\s+(?:RECURSIVE\s+)?[\w`\"\[\]]+\s*(?:\([^)]*\))?\s*AS\s*\(",
    re.IGNORECASE,
)


def _statement_end(text: str, start: int) -> int:
    """Index of the first semicolon outside quotes, or len(text)."""
    quote = None
    i = start
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == quote:
                if i + 1 < len(text) and text[i + 1] == quote:
                    i += 1
                else:
                    quote = None
        elif ch in "'\"`":
            quote = ch
        elif ch == ";":
            return i
        i += 1
    return len(text)


def _clean_sql(sql: str) -> str:
    sql = sql.strip()
    while sql.endswith(";"):
        sql = sql[:-1].rstrip()
    return sql


def _find_sql(text: str) -> tuple[str, tuple[int, int]] | None:
    for m in _FENCE.finditer(text):
        lang = m.group(1).lower()
        body = _clean_sql(m.group(2))
        if not body:
            continue
        if lang in ("sql", "sqlite") or (lang == "" and _SQL_START.match(body)):
            return body, m.span(2)
    m = _SQL_START.search(text)
    if m is None:
        return None
    end = _statement_end(text, m.start())
    body = _clean_sql(text[m.start():end])
    return (body, (m.start(), end)) if body else None


def extract_sql(text: str) -> str | None:
    """First fenced SQL block, else the first SELECT/WITH statement."""
    if not text:
        return None
    found = _find_sql(text)
    return found[0] if found else None


_ANSWER_TRIM = " \t\r\n.,;:!?\"'`*"


def _find_answer(text: str, patterns) -> tuple[str, tuple[int, int]] | None:
    lowered = text.lower()
    best = None
    for pat in patterns:
        pos = lowered.find(pat.lower())
        if pos >= 0 and (best is None or pos < best[0]):
            best = (pos, pat)
    if best is None:
        return None
    start = best[0] + len(best[1])
    end = text.find("\n", start)
    end = len(text) if end < 0 else end
    segment = text[start:end]
    value = segment.strip(_ANSWER_TRIM)
    if not value:
        return None
    offset = start + segment.index(value)
    return value, (offset, offset + len(value))


def extract_answer(text: str, patterns=DEFAULT_ANSWER_PATTERNS) -> str | None:
    """Text after the leftmost answer marker, up to the end of that line."""
    if not patterns:
        raise ValueError("patterns must be non-empty")
    if not text:
        return None
    found = _find_answer(text, patterns)
    return found[0] if found else None


_INDEX_MARKER = re.compile(r"index\s*:\s*(\d+)", re.IGNORECASE)
_STANDALONE_INT = re.compile(r"(?<![\w.])(\d+)(?!\w|\.\d)")


def _find_index(text: str, max_index: int) -> tuple[int, tuple[int, int]] | None:
    m = _INDEX_MARKER.search(text)
    if m and 1 <= int(m.group(1)) <= max_index:
        return int(m.group(1)), m.span(1)
    for m in _STANDALONE_INT.finditer(text):
        value = int(m.group(1))
        if 1 <= value <= max_index:
            return value, m.span(1)
    return None


def extract_index(text: str, max_index: int) -> int | None:
    """1-based selection index, from an ``Index:`` marker or a bare integer."""
    if max_index < 1:
        raise ValueError("max_index must be >= 1")
    if not text:
        return None
    found = _find_index(text, max_index)
    return found[0] if found else None


def extract(kind: ExtractionKind | str, text: str, *, schema: DatabaseSchema | None = None,
            patterns=DEFAULT_ANSWER_PATTERNS, max_index: int = 1) -> ExtractionOutcome:
    """Run one extractor and wrap its result, with the source span where one exists."""
    kind = ExtractionKind(kind)
    if kind is ExtractionKind.TABLES:
        return ExtractionOutcome(kind, tuple(extract_tables(text, schema)))
    if kind is ExtractionKind.COLUMNS:
        pairs = extract_columns(text, schema)
        return ExtractionOutcome(kind, tuple(f"{t}.{c}" for t, c in pairs))
    found = None
    if text:
        if kind is ExtractionKind.SQL:
            found = _find_sql(text)
        elif kind is ExtractionKind.ANSWER:
            found = _find_answer(text, patterns)
        else:
            found = _find_index(text, max_index)
    if found is None:
        return ExtractionOutcome(kind, ())
    return ExtractionOutcome(kind, (str(found[0]),), found[1])
