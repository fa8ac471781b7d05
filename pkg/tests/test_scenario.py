import json
from pathlib import Path
from typing import Any, Dict, List

import pytest

from grid_dsim.exception import ScenarioValidationError
from grid_dsim.scenario import TEMPLATES, parse_scenario
from grid_dsim.typings import Json

from .conftest import template_doc


def minimal() -> Json:
    return {
        "name": "mini",
        "seed": 42,
        "horizon": 1_000,
        "centers": [{"name": "C", "cpus": 1, "cpu_power": 10}],
        "workload": {"jobs": [{"id": "j1", "time": 5, "center": "C", "demand": 20}]},
    }


def errors_of(doc: Any) -> List[str]:
    with pytest.raises(ScenarioValidationError) as info:
        parse_scenario(doc)
    return info.value.errors


def test_minimal_scenario() -> None:
    config = parse_scenario(minimal())
    assert config.name == "mini"
    assert (config.seed, config.horizon, config.lookahead) == (42, 1_000, 1)
    assert config.local == 1
    assert [(p.lp_id, p.kind) for p in config.processes] == [
        (1, "center"),
        (2, "workload"),
    ]

    jobs = config.process(2).params["jobs"]
    assert jobs == [
        {
            "id": "j1",
            "time": 5,
            "to": 1,
            "message": {"op": "process", "job": "j1", "demand": 20},
            "demand": 20,
        }
    ]


def test_scenario_file(tmp_path: Path) -> None:
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(minimal()))
    from_file = parse_scenario(path).scenario_hash()
    assert from_file == parse_scenario(minimal()).scenario_hash()
    assert parse_scenario(str(path)).name == "mini"


def test_unknown_link() -> None:
    doc = minimal()
    doc["links"] = [{"id": "L1", "bandwidth": 100}]
    doc["workload"]["jobs"].append(
        {"id": "t1", "kind": "TRANSFER", "time": 5, "chain": ["L9"], "bits": 80}
    )
    assert errors_of(doc) == ["Job t1: unknown link 'L9'"]


@pytest.mark.parametrize("horizon", [0, -3])
def test_nonpositive_horizon(horizon: int) -> None:
    doc = {**minimal(), "horizon": horizon}
    errors = errors_of(doc)
    assert any("horizon must be positive" in e for e in errors)


def test_all_errors_are_reported() -> None:
    doc = minimal()
    doc.update(
        seed=-1,
        horizon=0,
        placement="lottery",
        processes=[{"id": 7, "kind": "teleporter"}],
    )
    doc["workload"]["jobs"].append({"id": "j2", "time": 5, "center": "Mars"})

    errors = errors_of(doc)
    assert len(errors) >= 5
    for fragment in (
        "seed must be",
        "horizon must be positive",
        "Unknown placement 'lottery'",
        "Process 7: unknown kind 'teleporter'",
        "Job j2: unknown center 'Mars'",
    ):
        assert any(fragment in e for e in errors), fragment


@pytest.mark.parametrize(
    "change, fragment",
    [
        ({"processes": [], "centers": [], "workload": {}}, "defines no processes"),
        ({"participants": "local:0"}, "Invalid participants"),
        ({"participants": []}, "participants list is empty"),
        ({"lookahead": 10}, "below the lookahead"),
        ({"metrics": {"weights": [1, 1, 0, 0]}}, "sum to 1"),
        ({"metrics": {"mode": "vibes"}}, "Unknown metrics mode"),
        ({"subscriptions": {"C.gpu": [1]}}, "unknown resource 'C.gpu'"),
        ({"horizon": "soon"}, "horizon: Invalid ISO-8601"),
    ],
)
def test_validation_errors(change: Dict[str, Any], fragment: str) -> None:
    doc = {**minimal(), **change}
    errors = errors_of(doc)
    assert any(fragment in e for e in errors), errors


def test_ping_pong_delay_below_lookahead() -> None:
    doc = template_doc("ping_pong", delay=1, lookahead=3)
    errors = errors_of(doc)
    assert errors == [
        "Process 1: delay 1 is below the lookahead 3",
        "Process 2: delay 1 is below the lookahead 3",
    ]


def test_time_values() -> None:
    doc = template_doc("ping_pong")
    doc["horizon"] = "PT2S"
    doc["processes"][0]["params"]["delay"] = 0.5
    config = parse_scenario(doc)
    assert config.horizon == 2_000_000
    assert config.process(1).params["delay"] == 500_000


def test_participants_list() -> None:
    doc = {
        **minimal(),
        "participants": [
            {"agent_id": 2, "address": "127.0.0.1:7002"},
            {"agent_id": 1, "address": "127.0.0.1:7001"},
        ],
    }
    config = parse_scenario(doc)
    assert config.local is None
    assert config.agents == {1: "127.0.0.1:7001", 2: "127.0.0.1:7002"}


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_templates_parse(name: str) -> None:
    config = parse_scenario({"template": name})
    assert config.processes
    assert config.horizon > 0


def test_template_overrides() -> None:
    config = parse_scenario(
        {"template": "ping_pong", "params": {"horizon": 77}, "trace": True, "seed": 5}
    )
    assert config.horizon == 77
    assert config.trace
    assert config.seed == 5


@pytest.mark.parametrize(
    "doc",
    [{"template": "nope"}, {"template": "ping_pong", "params": {"colour": "red"}}],
)
def test_bad_template(doc: Json) -> None:
    assert len(errors_of(doc)) == 1


def test_t0_t1_template() -> None:
    config = parse_scenario({"template": "t0_t1", "params": {"scale": 2}})
    kinds = [p.kind for p in config.processes]
    assert kinds.count("center") == 3
    assert kinds.count("network") == 1
    assert kinds.count("workload") == 1


def test_scenario_hash() -> None:
    a = parse_scenario(minimal())
    b = parse_scenario(minimal())
    c = parse_scenario({**minimal(), "seed": 43})

    assert a.scenario_hash() == b.scenario_hash()
    assert a.scenario_hash() != c.scenario_hash()
    assert len(a.scenario_hash()) == 16

    # Deployment does not change what is simulated
    d = parse_scenario({**minimal(), "participants": "local:3"})
    assert d.scenario_hash() == a.scenario_hash()


def test_generated_workload_depends_on_seed() -> None:
    def jobs(seed: int) -> List[Json]:
        doc = minimal()
        doc["seed"] = seed
        doc["workload"] = {"generator": {"count": 8, "interval": 20}}
        config = parse_scenario(doc)
        return [p for p in config.processes if p.kind == "workload"][0].params["jobs"]

    assert jobs(1) == jobs(1)
    assert jobs(1) != jobs(2)
    assert len(jobs(1)) == 8


@pytest.mark.parametrize("content", ["{oops", "[1, 2]"])
def test_malformed_file(tmp_path: Path, content: str) -> None:
    path = tmp_path / "bad.json"
    path.write_text(content)
    assert len(errors_of(path)) == 1
    assert len(errors_of(tmp_path / "missing.json")) == 1
