import sqlite3
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slmsql.errors import DatabaseNotFound, IncomparableShapes
from slmsql.executor import ExecStatus, ResultTable, execute, results_match


def test_select_one(company_db):
    out = execute(company_db, "SELECT 1")
    assert out.status is ExecStatus.SUCCESS and out.ok
    assert list(out.rows) == [(1,)]
    assert not out.truncated


def test_engine_message_is_verbatim(company_db):
    out = execute(company_db, "SELECT bogus FROM Employees")
    assert out.status is ExecStatus.ERROR
    # what the engine itself reports for the same statement
    con = sqlite3.connect(company_db)
    with pytest.raises(sqlite3.OperationalError) as err:
        con.execute("SELECT bogus FROM Employees")
    con.close()
    assert out.error_message == str(err.value) == "no such column: bogus"


def test_syntax_error_message(company_db):
    out = execute(company_db, "SELEC name FROM Employees")
    assert out.status is ExecStatus.ERROR
    assert 'near "SELEC": syntax error' in out.error_message


def test_recursive_query_times_out(company_db):
    start = time.monotonic()
    out = execute(company_db, "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c) SELECT * FROM c",
                  timeout=2)
    assert out.status is ExecStatus.TIMEOUT
    assert 2 <= time.monotonic() - start <= 3
    assert out.error_message


def test_row_limit_truncates(company_db):
    sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM c WHERE x < 50) SELECT x FROM c"
    out = execute(company_db, sql, row_limit=10)
    assert out.ok and out.truncated
    assert len(out.rows) == 10
    full = execute(company_db, sql, row_limit=50)
    assert not full.truncated and len(full.rows) == 50


def test_empty_sql_and_missing_file(company_db, tmp_path):
    assert execute(company_db, "   ").status is ExecStatus.ERROR
    with pytest.raises(DatabaseNotFound):
        execute(tmp_path / "gone.sqlite", "SELECT 1")


def test_columns_reported(company_db):
    out = execute(company_db, "SELECT name, salary AS pay FROM Employees WHERE employee_id = 1")
    assert list(out.columns) == ["name", "pay"]
    assert list(out.table().rows) == [("Alice", 120000.0)]


def test_concurrent_reads(company_db):
    results = []

    def worker():
        results.append(execute(company_db, "SELECT COUNT(*) FROM Employees").rows[0][0])

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == [5] * 8


# -- result comparison --------------------------------------------------------


def _t(rows, ncols=None):
    ncols = ncols if ncols is not None else (len(rows[0]) if rows else 1)
    return ResultTable(tuple(f"c{i}" for i in range(ncols)), tuple(tuple(r) for r in rows))


def test_results_match_examples():
    assert results_match(_t([(1, "a"), (2, "b")]), _t([(2, "b"), (1, "a")]))
    assert results_match(_t([(1,)]), _t([(1,), (1,)]))
    assert results_match(_t([(1,)]), _t([(1.0000001,)]))
    assert results_match(_t([(3,)]), _t([(3.0,)]))
    assert not results_match(_t([(1,)]), _t([(1.001,)]))
    assert not results_match(_t([("a",)]), _t([("A",)]))
    assert not results_match(_t([("1",)]), _t([(1,)]))
    assert results_match(_t([], 2), _t([], 2))


def test_arity_mismatch():
    with pytest.raises(IncomparableShapes):
        results_match(_t([(1, 2)]), _t([(1,)]))


def test_result_table_rejects_ragged_rows():
    with pytest.raises(ValueError):
        ResultTable(("a", "b"), ((1,),))


_values = st.one_of(st.integers(-5, 5), st.sampled_from([0.5, 1.0, 2.25, -3.0]),
                    st.sampled_from(["x", "y", ""]), st.none())
_tables = st.integers(1, 3).flatmap(
    lambda k: st.lists(st.tuples(*[_values] * k), max_size=6).map(lambda rows: _t(rows, k)))


@settings(max_examples=200, deadline=None)
@given(a=_tables, b=_tables)
def test_results_match_symmetric(a, b):
    if len(a.columns) != len(b.columns):
        return
    assert results_match(a, b) == results_match(b, a)


@settings(max_examples=200, deadline=None)
@given(a=_tables, data=st.data())
def test_results_match_reflexive_and_order_free(a, data):
    assert results_match(a, a)
    shuffled = data.draw(st.permutations(list(a.rows)))
    assert results_match(a, _t(shuffled, len(a.columns)))
