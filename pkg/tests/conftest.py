import json
from collections import defaultdict
from pathlib import Path

import pytest

from slmsql.fixtures import FIXTURE_DDL, build_benchmark, build_database, build_db_root

# criterion number -> list of (nodeid, outcome); filled by the report hook
_CRITERIA: dict[int, list] = defaultdict(list)
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _TITLES[n] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[n].append((item.nodeid, "skipped" if report.skipped else report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = [o for _, o in _CRITERIA[n]]
        if all(o == "skipped" for o in results):
            verdict = "SKIP"
        elif all(o in ("passed", "skipped") for o in results):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {_TITLES[n]} ({len(results)} test(s))")


@pytest.fixture
def company_db(tmp_path) -> Path:
    return build_database(tmp_path / "company.sqlite", "company")


@pytest.fixture
def shop_db(tmp_path) -> Path:
    return build_database(tmp_path / "shop.sqlite", "shop")


@pytest.fixture
def school_db(tmp_path) -> Path:
    return build_database(tmp_path / "school.sqlite", "school")


@pytest.fixture
def db_root(tmp_path) -> Path:
    return build_db_root(tmp_path / "databases")


@pytest.fixture(scope="session")
def bench_config(tmp_path_factory) -> Path:
    """Config path of the scripted 20-question benchmark (built once)."""
    return build_benchmark(tmp_path_factory.mktemp("bench"))


@pytest.fixture
def fresh_bench(tmp_path) -> Path:
    return build_benchmark(tmp_path / "bench")


@pytest.fixture(scope="session")
def bench_run(bench_config):
    """Run directory of one full-pipeline bench over the fixture."""
    from slmsql.bench import load_run_config, run_bench

    config = load_run_config(bench_config)
    run_dir = config.output_dir / "shared-full"
    run_bench(config, run_dir)
    return run_dir


def read_traces(trace_dir: Path) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(trace_dir).glob("*.jsonl"))]


@pytest.fixture(scope="session")
def schemas(tmp_path_factory):
    """Loaded schema of every fixture database, keyed by db_id."""
    from slmsql.schema import load_schema

    root = build_db_root(tmp_path_factory.mktemp("schemas"))
    return {db_id: load_schema(root / db_id / f"{db_id}.sqlite") for db_id in FIXTURE_DDL}
