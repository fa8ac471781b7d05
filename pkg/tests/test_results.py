import json
import time
from pathlib import Path

import pytest

from grid_dsim.exception import ContextError, IntegrityError, ScenarioValidationError
from grid_dsim.results import (
    CSV_COLUMNS,
    MANIFEST_FILE,
    RECORDS_FILE,
    ResultPool,
    ResultRecord,
    export_results,
    import_results,
    initial_contents,
    make_tags,
    record_result,
)
from grid_dsim.scenario import parse_scenario

CTX = 11


def rec(metric: str, vt: int, value: float, **tags: object) -> ResultRecord:
    return ResultRecord(CTX, metric, vt, value, make_tags(tags))


def sample_pool() -> ResultPool:
    pool = ResultPool(CTX, {"scenario": "demo", "seed": 3})
    for r in [
        rec("job_completion", 40, 1.5, job="J1"),
        rec("job_completion", 55, 0.25, job="J2"),
        rec("interrupts", 100, 2, component="T0.cpu0"),
        rec("job_completion", 90, 3.0, job="J3"),
        rec("db_object", 100, 60, center="T1a", object="O2", location="T1a.db"),
        rec("db_object", 100, 30, center="T1a", object="O1", location="T1a.db"),
        rec("db_object", 100, 90, center="T1a", object="O0", location="T1a.mss0"),
        rec("db_object", 100, 10, center="T0", object="raw", location="T0.db"),
    ]:
        record_result(pool, r)
    return pool


def test_query_by_tag() -> None:
    pool = sample_pool()
    found = pool.query("job_completion", job="J2")
    assert [(r.virtual_time, r.value) for r in found] == [(55, 0.25)]
    assert found[0].tag("job") == "J2"
    assert found[0].tag("missing") is None

    assert len(pool.query("job_completion")) == 3
    assert pool.total("job_completion") == pytest.approx(4.75)
    assert pool.values("interrupts", component="T0.cpu0") == [2.0]


def test_out_of_order_is_rejected() -> None:
    pool = ResultPool(CTX)
    record_result(pool, rec("latency", 50, 1.0, lp=2))
    # Another series may lag behind
    record_result(pool, rec("latency", 10, 1.0, lp=3))
    record_result(pool, rec("latency", 50, 2.0, lp=2))

    with pytest.raises(IntegrityError):
        record_result(pool, rec("latency", 49, 1.0, lp=2))
    assert len(pool) == 3


def test_cross_context_is_rejected() -> None:
    pool = ResultPool(CTX)
    with pytest.raises(ContextError):
        record_result(pool, ResultRecord(CTX + 1, "latency", 1, 1.0))
    assert len(pool) == 0


def test_from_wire() -> None:
    doc = {"metric": "tick", "vt": 9, "value": 2, "tags": {"lp": 4}, "lp": 4, "seq": 1}
    r = ResultRecord.from_wire(CTX, doc)
    assert r == rec("tick", 9, 2.0, lp="4")
    assert r.order == (9, 4, 1)


def test_csv_layout(tmp_path: Path) -> None:
    pool = ResultPool(CTX)
    record_result(pool, rec("latency", 7, 0.1, lp=2, job="x"))
    export_results(pool, tmp_path)

    lines = (tmp_path / RECORDS_FILE).read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == '11,latency,7,0.1,"{""job"":""x"",""lp"":""2""}"'

    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
    assert manifest["records"] == 1
    assert manifest["context_id"] == CTX
    assert manifest["columns"] == list(CSV_COLUMNS)


def test_export_import_export(tmp_path: Path) -> None:
    first = export_results(sample_pool(), tmp_path / "a")
    pool = import_results(first)
    second = export_results(pool, tmp_path / "b")

    for name in (RECORDS_FILE, MANIFEST_FILE):
        assert (first / name).read_bytes() == (second / name).read_bytes()

    assert len(pool) == 8
    assert pool.manifest["scenario"] == "demo"
    assert pool.query("job_completion", job="J3")[0].value == 3.0


def test_export_large_pool(tmp_path: Path) -> None:
    pool = ResultPool(CTX)
    for i in range(100_000):
        record_result(pool, rec("latency", i, i / 7, lp=i % 50))

    start = time.perf_counter()
    export_results(pool, tmp_path)
    elapsed = time.perf_counter() - start

    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
    assert manifest["records"] == 100_000
    # One second on an idle machine, with slack for loaded CI runners
    assert elapsed < 3.0


def test_truncated_records(tmp_path: Path) -> None:
    out = export_results(sample_pool(), tmp_path)
    text = (out / RECORDS_FILE).read_text()
    (out / RECORDS_FILE).write_text(text[: len(text) // 2])
    with pytest.raises(IntegrityError):
        import_results(out)


def test_altered_manifest(tmp_path: Path) -> None:
    out = export_results(sample_pool(), tmp_path)
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    manifest["records"] = 7
    (out / MANIFEST_FILE).write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        import_results(out)

    (out / MANIFEST_FILE).write_text("{")
    with pytest.raises(IntegrityError):
        import_results(out)


def test_missing_results(tmp_path: Path) -> None:
    with pytest.raises(IntegrityError):
        import_results(tmp_path / "nothing")


def test_initial_contents() -> None:
    assert initial_contents(sample_pool()) == {
        "T0": [{"object": "raw", "size": 10}],
        "T1a": [{"object": "O1", "size": 30}, {"object": "O2", "size": 60}],
    }


def test_results_seed_a_scenario(tmp_path: Path) -> None:
    export_results(sample_pool(), tmp_path / "run1")
    doc = {
        "horizon": 1_000,
        "initial_contents": "run1",
        "centers": [
            {"name": "T0", "db_capacity": 100},
            {"name": "T1a", "db_capacity": 100},
        ],
    }
    path = tmp_path / "run2.json"
    path.write_text(json.dumps(doc))

    config = parse_scenario(path)
    t1a = [p for p in config.processes if p.params["center"]["name"] == "T1a"][0]
    assert t1a.params["initial"] == [
        {"object": "O1", "size": 30},
        {"object": "O2", "size": 60},
    ]


def test_initial_contents_unknown_center(tmp_path: Path) -> None:
    export_results(sample_pool(), tmp_path / "run1")
    doc = {
        "horizon": 1_000,
        "initial_contents": "run1",
        "centers": [{"name": "T0", "db_capacity": 100}],
    }
    path = tmp_path / "run2.json"
    path.write_text(json.dumps(doc))

    with pytest.raises(ScenarioValidationError) as info:
        parse_scenario(path)
    assert info.value.errors == ["initial_contents names unknown center 'T1a'"]
