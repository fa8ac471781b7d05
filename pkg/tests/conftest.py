from typing import Any, Dict, List, Optional, Tuple

from grid_dsim.agent import AgentConfig
from grid_dsim.cli import parse_agents
from grid_dsim.client import LocalCluster, RunResult
from grid_dsim.events import EventKey, EventKind, SimEvent, encode_payload
from grid_dsim.scenario import TEMPLATES, ScenarioConfig, parse_scenario
from grid_dsim.typings import Json

con: Dict[str, Any]

# Short timeouts so the failure-path tests stay quick
FAST_CONFIG = AgentConfig(deadlock_timeout=1.0, publish_period=0.2, heartbeat=0.2)


def pytest_addoption(parser: Any) -> None:
    parser.addoption("--agents", action="store", default="")
    parser.addoption("--registry", action="store", default="")
    parser.addoption("--slow", action="store_true", default=False)


def pytest_configure(config: Any) -> None:
    global con
    agents = config.getoption("agents")
    con = {
        "agents": parse_agents(agents) if agents else {},
        "registry": config.getoption("registry") or None,
        "slow": config.getoption("slow"),
    }

    print("----------------------------------------")
    print("Agents: " + (agents or "in-process"))
    print("Registry: " + (con["registry"] or "none"))
    print("Slow tests: " + ("yes" if con["slow"] else "no"))
    print("----------------------------------------")


def make_event(
    ts: int,
    source: int = 1,
    seq: int = 0,
    dst: int = 1,
    kind: EventKind = EventKind.GENERIC,
    data: Optional[Json] = None,
    context_id: int = 7,
) -> SimEvent:
    key = EventKey(ts, source, seq)
    return SimEvent(key, context_id, source, dst, kind, encode_payload(data or {}))


def template(name: str, trace: bool = True, **params: Any) -> ScenarioConfig:
    doc: Json = {"template": name, "params": params, "trace": trace}
    return parse_scenario(doc)


def template_doc(name: str, **params: Any) -> Json:
    return TEMPLATES[name](**params)


def run_local(
    config: ScenarioConfig, n: int, agent_config: Optional[AgentConfig] = None
) -> RunResult:
    with LocalCluster(n, agent_config, logging_lvl="WARNING") as cluster:
        return cluster.run(config, timeout=60)


def trace_of(result: RunResult) -> List[Tuple[int, int, int, int]]:
    return [tuple(e) for e in result.trace]  # type: ignore


def record_rows(result: RunResult) -> List[Tuple[str, int, float, Any]]:
    return sorted(
        (r.metric, r.virtual_time, r.value, r.tags) for r in result.pool.records
    )
