"""SQLite schema introspection and DDL rendering.

A :class:`DatabaseSchema` is loaded once per database file and is immutable,
so it can be shared across concurrently running questions.
"""

from __future__ import annotations

import logging
import re
import sqlite3
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

from .errors import DatabaseNotFound, NotADatabase, UnknownTable

log = logging.getLogger(__name__)

_PLAIN_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_INTERNAL_PREFIXES = ("sqlite_",)


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    declared_type: str = ""
    is_primary_key: bool = False
    is_not_null: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("column name must be non-empty")


@dataclass(frozen=True)
class ForeignKeyInfo:
    from_table: str
    from_column: str
    to_table: str
    to_column: str


@dataclass(frozen=True)
class TableInfo:
    name: str
    columns: tuple[ColumnInfo, ...]
    foreign_keys: tuple[ForeignKeyInfo, ...] = ()

    def __post_init__(self):
        if not self.columns:
            raise ValueError(f"table {self.name!r} has no columns")
        seen = set()
        for col in self.columns:
            key = col.name.lower()
            if key in seen:
                raise ValueError(f"duplicate column {col.name!r} in {self.name!r}")
            seen.add(key)

    def column(self, name: str) -> ColumnInfo | None:
        lowered = name.lower()
        for col in self.columns:
            if col.name.lower() == lowered:
                return col
        return None


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[TableInfo, ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = [t.name.lower() for t in self.tables]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate table names in {self.db_id!r}")

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def table(self, name: str) -> TableInfo | None:
        return self._by_lower.get(name.lower())

    @cached_property
    def _by_lower(self) -> dict[str, TableInfo]:
        return {t.name.lower(): t for t in self.tables}

    @cached_property
    def column_owners(self) -> dict[str, list[tuple[str, str]]]:
        """Lower-cased column name -> every (table, column) carrying it."""
        owners: dict[str, list[tuple[str, str]]] = {}
        for t in self.tables:
            for c in t.columns:
                owners.setdefault(c.name.lower(), []).append((t.name, c.name))
        return owners

    def canonical_tables(self, names: Iterable[str]) -> list[str]:
        """Map names to their catalog spelling, in catalog order."""
        wanted = set()
        for name in names:
            table = self.table(name)
            if table is None:
                raise UnknownTable(name)
            wanted.add(table.name)
        return [t.name for t in self.tables if t.name in wanted]


def quote_identifier(name: str) -> str:
    if _PLAIN_IDENT.match(name):
        return name
    return "`" + name.replace("`", "``") + "`"


def _connect_readonly(db_path: Path) -> sqlite3.Connection:
    uri = f"{db_path.resolve().as_uri()}?mode=ro"
    return sqlite3.connect(uri, uri=True, check_same_thread=False)


def load_schema(db_path: str | Path, db_id: str | None = None) -> DatabaseSchema:
    """Introspect every user table of a SQLite file.

    Foreign keys whose target does not exist in the file are dropped with a
    warning; BIRD ships a few such dangling references.
    """
    path = Path(db_path)
    if not path.is_file():
        raise DatabaseNotFound(str(path))
    db_id = db_id or path.stem
    try:
        conn = _connect_readonly(path)
    except sqlite3.Error as exc:
        raise NotADatabase(f"{path}: {exc}") from exc
    try:
        try:
            rows = conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' ORDER BY rowid"
            ).fetchall()
        except sqlite3.DatabaseError as exc:
            raise NotADatabase(f"{path}: {exc}") from exc
        table_names = [r[0] for r in rows if not r[0].lower().startswith(_INTERNAL_PREFIXES)]
        lower_names = {n.lower(): n for n in table_names}

        columns: dict[str, tuple[ColumnInfo, ...]] = {}
        for name in table_names:
            info = conn.execute(f"PRAGMA table_info({_pragma_arg(name)})").fetchall()
            # (cid, name, type, notnull, dflt_value, pk)
            columns[name] = tuple(
                ColumnInfo(name=r[1], declared_type=r[2] or "", is_primary_key=r[5] > 0,
                           is_not_null=bool(r[3]))
                for r in sorted(info, key=lambda r: r[0])
            )

        tables = []
        for name in table_names:
            fks = []
            for r in conn.execute(f"PRAGMA foreign_key_list({_pragma_arg(name)})").fetchall():
                # (id, seq, table, from, to, on_update, on_delete, match)
                target = lower_names.get(str(r[2]).lower())
                if target is None:
                    log.warning("%s: dropping FK %s.%s -> %s (no such table)", db_id, name, r[3], r[2])
                    continue
                to_col = r[4]
                if to_col is None:
                    pks = [c.name for c in columns[target] if c.is_primary_key]
                    if len(pks) <= r[1]:
                        continue
                    to_col = pks[r[1]]
                src = _find_column(columns[name], r[3])
                dst = _find_column(columns[target], to_col)
                if src is None or dst is None:
                    log.warning("%s: dropping FK %s.%s -> %s.%s (no such column)",
                                db_id, name, r[3], target, to_col)
                    continue
                fk = ForeignKeyInfo(name, src, target, dst)
                if fk not in fks:
                    fks.append(fk)
            tables.append(TableInfo(name=name, columns=columns[name], foreign_keys=tuple(fks)))
        return DatabaseSchema(db_id=db_id, tables=tuple(tables))
    finally:
        conn.close()


def _pragma_arg(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def _find_column(cols: Iterable[ColumnInfo], name: str) -> str | None:
    lowered = name.lower()
    for c in cols:
        if c.name.lower() == lowered:
            return c.name
    return None


def _render_table(table: TableInfo, kept: set[str]) -> str:
    pk_cols = [c for c in table.columns if c.is_primary_key]
    inline_pk = len(pk_cols) == 1
    lines = []
    for col in table.columns:
        parts = [quote_identifier(col.name)]
        if col.declared_type:
            parts.append(col.declared_type)
        if col.is_primary_key and inline_pk:
            parts.append("PRIMARY KEY")
        if col.is_not_null and not col.is_primary_key:
            parts.append("NOT NULL")
        lines.append(" ".join(parts))
    if len(pk_cols) > 1:
        lines.append("PRIMARY KEY (" + ", ".join(quote_identifier(c.name) for c in pk_cols) + ")")
    for fk in table.foreign_keys:
        if fk.to_table not in kept:
            continue
        lines.append(
            f"FOREIGN KEY ({quote_identifier(fk.from_column)}) "
            f"REFERENCES {quote_identifier(fk.to_table)}({quote_identifier(fk.to_column)})"
        )
    body = ",\n".join("    " + line for line in lines)
    return f"CREATE TABLE {quote_identifier(table.name)} (\n{body}\n);"


def render_ddl(schema: DatabaseSchema, keep: Iterable[str] | None = None) -> str:
    """Render CREATE TABLE statements for the kept tables, in catalog order.

    ``keep=None`` keeps every table. Foreign-key clauses are emitted only when
    both endpoints survive.
    """
    names = schema.table_names if keep is None else schema.canonical_tables(keep)
    kept = set(names)
    return "\n\n".join(_render_table(schema.table(n), kept) for n in names)


def _unquote(token: str) -> str:
    token = token.strip()
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "`\"'":
        return token[1:-1]
    if len(token) >= 2 and token[0] == "[" and token[-1] == "]":
        return token[1:-1]
    return token


_QUALIFIED = re.compile(
    r"""^\s*(`[^`]+`|"[^"]+"|\[[^\]]+\]|[^.]+?)\s*\.\s*(`[^`]+`|"[^"]+"|\[[^\]]+\]|.+?)\s*$"""
)


def resolve_identifier(schema: DatabaseSchema, token: str) -> tuple[str, str | None] | None:
    """Resolve a table, ``table.column`` or bare column mention.

    Returns ``(table, None)`` for a table, ``(table, column)`` for a column and
    ``None`` for no match. A bare column carried by several tables is ambiguous
    and resolves to ``None``.
    """
    if not token or not token.strip():
        return None
    whole = _unquote(token)
    table = schema.table(whole)
    if table is not None:
        return table.name, None

    m = _QUALIFIED.match(token)
    if m:
        table = schema.table(_unquote(m.group(1)))
        if table is not None:
            col = table.column(_unquote(m.group(2)))
            if col is not None:
                return table.name, col.name
        return None

    owners = schema.column_owners.get(whole.lower(), [])
    if len(owners) == 1:
        return owners[0]
    return None
