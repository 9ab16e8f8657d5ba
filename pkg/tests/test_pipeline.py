from dataclasses import replace

import pytest

from slmsql.backend import FunctionBackend, ModelRole, ModelRouter, ScriptedBackend
from slmsql.errors import BackendUnavailable, DatabaseUnavailable, StageError
from slmsql.executor import ExecStatus, ExecutionOutcome
from slmsql.pipeline import (
    NO_SQL_FOUND,
    Candidate,
    Components,
    PathKind,
    Pipeline,
    PipelineConfig,
    QuestionTask,
    mode_vote,
    normalize_sql,
)
from slmsql.prompts import StageKind

B1_QUESTION = "What is the salary of the employee named 'Alice'?"


class Recorder:
    """Function backend that logs requests and answers from a per-stage table."""

    def __init__(self, replies=None, default="SELECT 1"):
        self.replies = replies or {}
        self.default = default
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        reply = self.replies.get(request.stage.split("/")[0])
        if reply is None:
            reply = self.replies.get(request.stage, self.default)
        if callable(reply):
            reply = reply(request)
        if isinstance(reply, str):
            return [reply] * request.sampling.expected_outputs
        return reply

    def stages(self):
        return [r.stage for r in self.requests]


def make_pipeline(db_root, chat=None, sql=None, **config):
    router = ModelRouter()
    chat = chat or Recorder()
    sql = sql or Recorder()
    router.bind(ModelRole.CHAT, FunctionBackend(chat))
    router.bind(ModelRole.SQL, FunctionBackend(sql))
    return Pipeline(router, db_root, PipelineConfig(**config)), chat, sql


def task(question=B1_QUESTION, db="company", hint=None):
    return QuestionTask(question, db, hint, "q")


def test_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.candidates_per_path, cfg.correction_candidates, cfg.selection_rounds) == (4, 2, 3)
    assert cfg.pool_size == 16
    assert (cfg.sampling.temperature, cfg.sampling.top_p) == (0.2, 0.8)
    assert cfg.role_for(StageKind.PRUNING) is ModelRole.CHAT
    assert cfg.role_for(StageKind.LINKING) is ModelRole.CHAT
    assert cfg.role_for(StageKind.SELECTION_QUERY_ONLY) is ModelRole.CHAT
    assert cfg.role_for(StageKind.SELECTION_WITH_RESULTS) is ModelRole.CHAT
    assert cfg.role_for(StageKind.GENERATION_WITH_LINKING) is ModelRole.SQL
    assert cfg.role_for(StageKind.GENERATION_WITHOUT_LINKING) is ModelRole.SQL
    assert cfg.role_for(StageKind.CORRECTION) is ModelRole.SQL
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"candidates": 3})
    assert len(PathKind) == 4


# -- pruning / linking --------------------------------------------------------


@pytest.mark.parametrize("reply,db,expected,fallback", [
    ("The relevant table is Employees.", "company", ["Employees"], False),
    ("I don't know", "company", ["Employees", "Departments"], True),
    ("SELECT * FROM orders", "shop", ["orders"], False),
])
def test_run_pruning(db_root, reply, db, expected, fallback):
    pipeline, chat, _ = make_pipeline(db_root, chat=Recorder({"pruning": reply}))
    _, schema = pipeline.load(db)
    assert pipeline.run_pruning(task(db=db), schema) == (expected, fallback)
    [req] = chat.requests
    assert req.sampling.greedy and req.role is ModelRole.CHAT
    assert "Among the following tables:" in req.user


@pytest.mark.parametrize("reply,expected", [
    ("The related columns are Employees.name and Employees.salary.", [("Employees", "name"), ("Employees", "salary")]),
    ("¯\\_(ツ)_/¯", []),
    ("Employees.age and Employees.name", [("Employees", "name")]),
])
def test_run_linking(db_root, reply, expected):
    pipeline, chat, _ = make_pipeline(db_root, chat=Recorder({"linking": reply}))
    _, schema = pipeline.load("company")
    cols, empty = pipeline.run_linking(task(), schema)
    assert cols == expected and empty == (not expected)
    assert "Departments" in chat.requests[0].user  # full schema, even after pruning


# -- generation ---------------------------------------------------------------


def test_default_pool_is_sixteen(db_root):
    pipeline, _, sql = make_pipeline(db_root)
    path, schema = pipeline.load("company")
    cands = pipeline.generate_candidates(task(), schema, ["Employees"], [("Employees", "salary")], path)
    assert len(cands) == 16
    assert [c.path for c in cands] == [p for p in PathKind for _ in range(4)]
    assert [c.id for c in cands] == list(range(16))
    assert [r.sampling.num_candidates for r in sql.requests] == [4] * 4
    assert all(not r.sampling.greedy for r in sql.requests)


def test_pruned_equal_full_still_runs_all_paths(db_root):
    pipeline, _, sql = make_pipeline(db_root)
    path, schema = pipeline.load("company")
    pipeline.generate_candidates(task(), schema, schema.table_names, [], path)
    users = {r.stage.split("/")[1]: r.user for r in sql.requests}
    assert len(users) == 4
    assert users["pruned_linked"] == users["full_linked"]
    assert users["pruned_only"] == users["full_only"]


def test_prompts_differ_per_path(db_root):
    pipeline, _, sql = make_pipeline(db_root)
    path, schema = pipeline.load("company")
    pipeline.generate_candidates(task(), schema, ["Employees"], [("Employees", "salary")], path)
    users = {r.stage.split("/")[1]: r.user for r in sql.requests}
    assert "Departments" not in users["pruned_linked"] and "Departments" in users["full_linked"]
    assert "Employees.salary" in users["pruned_linked"] and "Employees.salary" not in users["pruned_only"]


def test_one_candidate_per_path(db_root):
    pipeline, _, _ = make_pipeline(db_root, candidates_per_path=1)
    path, schema = pipeline.load("company")
    assert len(pipeline.generate_candidates(task(), schema, ["Employees"], [], path)) == 4


def test_non_sql_output_becomes_error_candidate(db_root):
    pipeline, _, _ = make_pipeline(db_root, sql=Recorder({"generation": "I cannot help."}))
    path, schema = pipeline.load("company")
    cands = pipeline.generate_candidates(task(), schema, ["Employees"], [], path)
    assert all(c.outcome.status is ExecStatus.ERROR and c.outcome.error_message == NO_SQL_FOUND for c in cands)


def test_partial_path_failure(db_root):
    def flaky(request):
        if request.stage.endswith("full_linked"):
            raise BackendUnavailable("down")
        return ["SELECT 1"] * request.sampling.num_candidates

    router = ModelRouter()
    router.bind("chat", FunctionBackend(lambda r: "x"))
    router.bind("sql", FunctionBackend(flaky))
    pipeline = Pipeline(router, db_root)
    path, schema = pipeline.load("company")
    failures = {}
    cands = pipeline.generate_candidates(task(), schema, ["Employees"], [], path, failures)
    assert len(cands) == 12
    assert PathKind.FULL_LINKED not in {c.path for c in cands}
    assert set(failures) == {"full_linked"}


def test_all_paths_failing_raises(db_root):
    router = ModelRouter()
    router.bind("sql", FunctionBackend(lambda r: (_ for _ in ()).throw(BackendUnavailable("down"))))
    router.bind("chat", FunctionBackend(lambda r: "x"))
    pipeline = Pipeline(router, db_root)
    path, schema = pipeline.load("company")
    with pytest.raises(StageError):
        pipeline.generate_candidates(task(), schema, ["Employees"], [], path)


# -- correction ---------------------------------------------------------------


def _failed(cid=0, sql="SELECT bogus FROM Employees", path=PathKind.PRUNED_ONLY):
    return Candidate(cid, sql, path, ExecutionOutcome.error("no such column: bogus"))


def test_correction_two_children(db_root):
    sql = Recorder({"correction": ["SELECT name FROM Employees", "SELECT nope FROM Employees"]})
    pipeline, _, _ = make_pipeline(db_root, sql=sql)
    path, schema = pipeline.load("company")
    kids = pipeline.correct(_failed(), task(), schema, ["Employees"], path, next_id=16)
    assert [(k.id, k.parent_id, k.attempt, k.path) for k in kids] == [
        (16, 0, 1, PathKind.PRUNED_ONLY), (17, 0, 2, PathKind.PRUNED_ONLY)]
    assert kids[0].executable and not kids[1].executable
    [req] = sql.requests
    assert "SELECT bogus FROM Employees" in req.user
    assert "no such column: bogus" in req.user
    assert "Departments" not in req.user  # the failed path's (pruned) schema


def test_correction_rejects_successful_parent(db_root):
    pipeline, _, _ = make_pipeline(db_root)
    path, schema = pipeline.load("company")
    ok = Candidate(0, "SELECT 1", PathKind.FULL_ONLY, ExecutionOutcome(ExecStatus.SUCCESS, rows=((1,),)))
    with pytest.raises(ValueError):
        pipeline.correct(ok, task(), schema, [], path, 1)


# -- selection ----------------------------------------------------------------


def _ok(cid, sql, rows=((1,),)):
    return Candidate(cid, sql, PathKind.FULL_ONLY, ExecutionOutcome(ExecStatus.SUCCESS, rows=rows, columns=("v",)))


def _select(db_root, votes, executables, **config):
    replies = iter(votes)
    chat = Recorder({"selection": lambda r: next(replies)})
    pipeline, chat, _ = make_pipeline(db_root, chat=chat, **config)
    _, schema = pipeline.load("company")
    return pipeline.select(task(), schema, executables), chat


@pytest.mark.parametrize("votes,winner", [
    (["Index: 2", "Index: 3", "Index: 2"], 1),
    (["Index: 1", "Index: 2", "Index: 3"], 0),
    (["Index: 3", "gibberish", "Index: 1"], 2),
    (["??", "Index: 2", "nah"], 1),
])
def test_selection_votes(db_root, votes, winner):
    execs = [_ok(i, f"SELECT {i}") for i in range(3)]
    result, chat = _select(db_root, votes, execs)
    assert result.candidate is execs[winner]
    assert result.mode == "model"
    assert len(chat.requests) == 3


def test_selection_all_unparsable_falls_back(db_root):
    execs = [_ok(i, f"SELECT {i}") for i in range(3)]
    result, _ = _select(db_root, ["hmm"] * 3, execs)
    assert result.candidate is execs[0] and result.mode == "fallback"
    assert result.votes == (None, None, None)


def test_single_executable_short_circuits(db_root):
    only = _ok(5, "SELECT 5")
    result, chat = _select(db_root, [], [only])
    assert result.candidate is only and chat.requests == []


def test_duplicates_collapse_before_selection(db_root):
    execs = [_ok(0, "SELECT  1"), _ok(1, "SELECT 1"), _ok(2, "SELECT\n1")]
    result, chat = _select(db_root, [], execs)
    assert result.candidate is execs[0] and chat.requests == []


def test_selection_template_choice(db_root):
    small = [_ok(0, "SELECT 0"), _ok(1, "SELECT 1")]
    _, chat = _select(db_root, ["Index: 1"] * 3, small)
    assert "Execution Results" in chat.requests[0].user
    assert "Result:\nv\n1" in chat.requests[0].user

    big = [_ok(0, "SELECT 0"), _ok(1, "SELECT 1", rows=tuple((i,) for i in range(6)))]
    _, chat = _select(db_root, ["Index: 1"] * 3, big)
    assert "Execution Results" not in chat.requests[0].user
    assert "Index 2:\nSELECT 1" in chat.requests[0].user


def test_selection_disabled_is_feq(db_root):
    execs = [_ok(3, "SELECT 3"), _ok(7, "SELECT 7")]
    result, chat = _select(db_root, [], execs, components=Components(selection=False))
    assert result.candidate is execs[0] and result.mode == "feq" and chat.requests == []


def test_mode_vote():
    assert mode_vote([2, 3, 2]) == 2
    assert mode_vote([1, 2, 3]) == 1
    assert mode_vote([None, 3, 2]) == 3
    assert mode_vote([None, None]) is None
    assert normalize_sql(" SELECT \n a\tFROM t ") == "SELECT a FROM t"


# -- whole question -----------------------------------------------------------


def test_only_executable_is_selected_without_vote(db_root):
    def gen(request):
        if request.stage == "generation/full_linked":
            return ["SELECT nope", "SELECT nope", "SELECT salary FROM Employees WHERE name = 'Alice'", "SELECT nope"]
        return ["SELECT nope"] * 4

    pipeline, chat, _ = make_pipeline(db_root, chat=Recorder({"pruning": "Employees", "linking": "salary"}),
                                      sql=Recorder({"generation": gen, "correction": "still broken"}))
    result = pipeline.run(task())
    assert result.selected.path is PathKind.FULL_LINKED and result.selected.id == 6
    assert "selection" not in chat.stages()
    assert result.selection_votes == []


def test_two_executables_rigged_votes(db_root):
    def gen(request):
        if request.stage == "generation/pruned_linked":
            return ["SELECT name FROM Employees"] * 4
        if request.stage == "generation/full_only":
            return ["SELECT salary FROM Employees"] * 4
        return ["SELECT nope"] * 4

    votes = iter(["Index: 1", "Index: 1", "Index: 2"])
    chat = Recorder({"pruning": "Employees", "linking": "name", "selection": lambda r: next(votes)})
    pipeline, chat, _ = make_pipeline(db_root, chat=chat, sql=Recorder({"generation": gen, "correction": "no"}))
    result = pipeline.run(task())
    assert result.selected.sql == "SELECT name FROM Employees"
    assert result.selection_votes == [0, 0, 12]
    assert len(result.selection_votes) == 3


def test_total_failure(db_root):
    pipeline, _, _ = make_pipeline(db_root, sql=Recorder({"generation": "SELECT nope", "correction": "SELECT nope"}))
    result = pipeline.run(task())
    assert result.selected is None and result.executables == []
    initial = [c for c in result.all_candidates if c.parent_id is None]
    assert len(initial) == 16 and len(result.all_candidates) == 16 + 32
    assert result.predicted_sql == "SELECT nope"


def test_stage_order_and_roles(db_root):
    pipeline, chat, sql = make_pipeline(
        db_root, chat=Recorder({"pruning": "Employees", "linking": "salary", "selection": "Index: 1"}),
        sql=Recorder({"generation": lambda r: ["SELECT 1", "SELECT 2", "SELECT x", "SELECT 2"],
                      "correction": "SELECT 3"}))
    pipeline.run(task())
    assert chat.stages()[:2] == ["pruning", "linking"]
    assert set(chat.stages()[2:]) == {"selection"}
    assert all(s.startswith(("generation", "correction")) for s in sql.stages())
    assert sql.stages()[:4] == [f"generation/{p.value}" for p in PathKind]


def test_single_backend_serves_both_roles(db_root):
    shared = Recorder({"pruning": "Employees", "linking": "salary", "selection": "Index: 1"})
    router = ModelRouter()
    backend = FunctionBackend(shared)
    router.bind("chat", backend)
    router.bind("sql", backend)
    result = Pipeline(router, db_root).run(task())
    assert router.unified and result.selected is not None
    assert {r.role for r in shared.requests} == {ModelRole.CHAT, ModelRole.SQL}


@pytest.mark.parametrize("name", ["pruning", "linking", "multi_candidate", "correction", "selection"])
def test_component_toggles(db_root, name):
    chat = Recorder({"pruning": "Employees", "linking": "salary", "selection": "Index: 2"})
    sql = Recorder({"generation": lambda r: [f"SELECT {i}" for i in range(r.sampling.num_candidates)],
                    "correction": "SELECT 9"})
    # make one path fail so correction has something to do
    base = sql.replies["generation"]
    sql.replies["generation"] = lambda r: ["SELECT nope"] * r.sampling.num_candidates \
        if r.stage.endswith("full_only") else base(r)
    pipeline, chat, sql = make_pipeline(db_root, chat=chat, sql=sql, components=Components().without(name))
    result = pipeline.run(task())
    initial = [c for c in result.all_candidates if c.parent_id is None]
    if name == "pruning":
        assert "pruning" not in chat.stages()
        assert result.pruned_tables == ["Employees", "Departments"]
    if name == "linking":
        assert "linking" not in chat.stages()
        assert all("Important Columns" not in r.user for r in sql.requests if r.stage.startswith("generation"))
    if name == "multi_candidate":
        assert len(initial) == 4
    else:
        assert len(initial) == 16
    if name == "correction":
        assert "correction" not in sql.stages()
        assert len(result.all_candidates) == len(initial)
    if name == "selection":
        assert "selection" not in chat.stages() and result.selection_mode == "feq"
        assert result.selected is result.executables[0]


def test_backend_failure_names_stage(db_root):
    router = ModelRouter()
    router.bind("sql", FunctionBackend(lambda r: "SELECT 1"))
    pipeline = Pipeline(router, db_root)  # no chat backend
    with pytest.raises(StageError) as err:
        pipeline.run(task())
    assert err.value.stage == "pruning"


def test_unknown_database(db_root):
    pipeline, _, _ = make_pipeline(db_root)
    with pytest.raises(DatabaseUnavailable):
        pipeline.run(task(db="nowhere"))


def test_repeat_runs_identical(db_root):
    script = [
        {"stage": "pruning", "responses": ["Employees"]},
        {"stage": "linking", "responses": ["salary"]},
        {"stage": "generation", "responses": [["SELECT 1", "SELECT 2"], ["SELECT x"]]},
        {"stage": "correction", "responses": [["SELECT 3", "nothing"]]},
        {"stage": "selection", "responses": ["Index: 2", "Index: 1"]},
    ]

    def once():
        router = ModelRouter()
        router.bind("chat", ScriptedBackend(script))
        router.bind("sql", ScriptedBackend(script))
        return Pipeline(router, db_root).run(task()).to_record(include_timings=False)

    assert once() == once()


def test_hint_reaches_prompts(db_root):
    pipeline, chat, sql = make_pipeline(db_root)
    pipeline.run(task(hint="salary is yearly"))
    assert all("salary is yearly" in r.user for r in chat.requests + sql.requests if r.stage != "correction")


def test_config_replace_keeps_validation():
    with pytest.raises(ValueError):
        replace(PipelineConfig(), selection_rounds=0)
