from typing import List

import pytest

from grid_dsim.agent import (
    AgentConfig,
    ContextFactory,
    SimulationAgent,
    derive_context_id,
)
from grid_dsim.events import EventKind, ProcessContext
from grid_dsim.exception import ConfigError, ContextError, PlacementError
from grid_dsim.scenario import parse_scenario
from grid_dsim.sync import MessageKind, SyncMessage
from grid_dsim.transport import LoopbackHub, LoopbackTransport
from grid_dsim.wire import MsgType, decode_frame, encode_frame, sync_to_frame

from .conftest import template, template_doc


@pytest.fixture
def hub() -> LoopbackHub:
    return LoopbackHub()


def new_agent(hub: LoopbackHub, agent_id: int = 1) -> SimulationAgent:
    return SimulationAgent(
        agent_id, LoopbackTransport(hub), AgentConfig(), logging_lvl="WARNING"
    )


def listen(hub: LoopbackHub, agent_id: int) -> List[bytes]:
    got: List[bytes] = []
    LoopbackTransport(hub).start(agent_id, got.append)
    return got


def test_config_from_env() -> None:
    config = AgentConfig.from_env(
        {
            "GRID_DSIM_WORKERS": "8",
            "GRID_DSIM_WEIGHTS": "0.4,0.3,0.2,0.1",
            "GRID_DSIM_REUSE_LPS": "yes",
            "GRID_DSIM_REGISTRY": "http://registry:8000",
            "GRID_DSIM_DEADLOCK_TIMEOUT": "2.5",
            "UNRELATED": "1",
        }
    )
    assert config.workers == 8
    assert config.weights == (0.4, 0.3, 0.2, 0.1)
    assert config.reuse_lps
    assert config.registry == "http://registry:8000"
    assert config.deadlock_timeout == 2.5
    assert config.lookahead == AgentConfig().lookahead

    assert AgentConfig.from_env({}) == AgentConfig()


@pytest.mark.parametrize(
    "key, value",
    [
        ("GRID_DSIM_WORKERS", "many"),
        ("GRID_DSIM_WEIGHTS", "1,0"),
        ("GRID_DSIM_HEARTBEAT", "often"),
    ],
)
def test_config_from_env_invalid(key: str, value: str) -> None:
    with pytest.raises(ConfigError):
        AgentConfig.from_env({key: value})


def test_context_ids() -> None:
    a = derive_context_id("abc", 1)
    assert a == derive_context_id("abc", 1)
    assert a != derive_context_id("abc", 2)
    assert a != derive_context_id("abc", 1, attempt=1)
    assert a > 0


def test_context_factory() -> None:
    factory = ContextFactory()
    first = factory.allocate("abc", 1, [1, 2])
    second = factory.allocate("abc", 1, [1, 2])
    assert first == derive_context_id("abc", 1)
    assert second != first
    assert first in factory and second in factory

    assert factory.release(first)
    assert not factory.release(first)
    assert factory.allocate("abc", 1, [1], taken=[first]) not in (first, second)

    with pytest.raises(ContextError):
        factory.add(second, [3])


@pytest.mark.parametrize(
    "agent_id, error", [(0, ValueError), (-2, ValueError), (True, TypeError)]
)
def test_invalid_agent_id(hub: LoopbackHub, agent_id: int, error: type) -> None:
    with pytest.raises(error):
        SimulationAgent(agent_id, LoopbackTransport(hub), AgentConfig())


def test_invalid_transport() -> None:
    with pytest.raises(TypeError):
        SimulationAgent(1, "tcp", AgentConfig())  # type: ignore


def test_create_context(hub: LoopbackHub) -> None:
    agent = new_agent(hub)
    config = template("ping_pong")

    engine = agent.create_context(5, {1, 2}, config)
    assert sorted(engine.lps) == [1]
    assert engine.remotes == {2}
    assert agent.engine(5) is engine
    assert agent.lp_count == 1

    # The scenario may also come as a document, routes then default to
    # round-robin over the participants
    engine = agent.create_context(6, {1}, config.to_json())
    assert sorted(engine.lps) == [1, 2]
    assert agent.lp_count == 3

    with pytest.raises(ContextError):
        agent.create_context(5, {1, 2}, config)
    with pytest.raises(ContextError):
        agent.create_context(7, {2, 3}, config)
    with pytest.raises(ContextError):
        agent.create_context(8, {1, 2}, config, routes={1: 1, 2: 3})

    agent.destroy_context(5)
    assert agent.engine(5) is None
    assert 5 not in agent.factory
    with pytest.raises(ContextError):
        agent.start_context(5)

    agent.destroy_context(6)
    assert agent.lp_count == 0


def test_create_over_the_wire(hub: LoopbackHub) -> None:
    agent = new_agent(hub)
    replies = listen(hub, 0)
    config = template("ping_pong")

    def prepare(participants: List[int]) -> dict:
        body = {
            "phase": "prepare",
            "scenario": config.to_json(),
            "routes": {"1": 1, "2": 2},
            "participants": participants,
            "client": {"id": 0},
        }
        agent.route_message(encode_frame(MsgType.CONTEXT_CREATE, 21, body))
        reply = decode_frame(replies.pop())
        assert reply.msg_type == MsgType.RESULT
        assert reply.context_id == 21
        return reply.body

    refused = prepare([2, 3])
    assert (refused["kind"], refused["error"]) == ("nack", "ContextError")

    assert prepare([1, 2]) == {"kind": "ack", "phase": "prepare", "agent": 1}
    assert agent.engine(21) is not None

    again = prepare([1, 2])
    assert (again["kind"], again["error"]) == ("nack", "exists")

    agent.route_message(encode_frame(MsgType.CONTEXT_DESTROY, 21, {}))
    assert agent.engine(21) is None
    assert replies == []


def test_unknown_context_is_nacked(hub: LoopbackHub) -> None:
    agent = new_agent(hub)
    got = listen(hub, 2)

    request = SyncMessage(MessageKind.LVT_REQUEST, 99, 2, 1, threshold=5)
    agent.route_message(sync_to_frame(request))

    [frame] = got
    nack = decode_frame(frame)
    assert nack.msg_type == MsgType.NACK
    assert nack.context_id == 99
    assert nack.body["reason"] == "unknown context"
    assert nack.body["msg_type"] == int(MsgType.LVT_REQUEST)


def test_malformed_frames_are_skipped(hub: LoopbackHub) -> None:
    agent = new_agent(hub)
    got = listen(hub, 2)

    agent.route_message(b"\x00\x01")
    agent.route_message(encode_frame(MsgType.PERF_PUBLISH, 0, {"agent": 2}))
    agent.route_message(encode_frame(MsgType.EVENT, 4, {"not": "an event"}))
    assert got == []
    assert agent.perf == {}


def test_performance_is_published(hub: LoopbackHub) -> None:
    agent = new_agent(hub)
    got = listen(hub, 2)
    agent.create_context(5, {1, 2}, template("ping_pong"))

    value = agent.publish_performance()
    assert value.agent == 1
    assert agent.perf[1] == value

    [frame] = got
    f = decode_frame(frame)
    assert f.msg_type == MsgType.PERF_PUBLISH
    assert f.body["agent"] == 1

    other = new_agent(hub, 3)
    other.route_message(frame)
    assert other.perf[1] == value
    agent.destroy_context(5)


def test_placement_skips_unreachable_agents(hub: LoopbackHub) -> None:
    agent = new_agent(hub)
    listen(hub, 2)

    doc = template_doc("dynamic_jobs")
    doc["metrics"] = {
        "samples": {
            str(a): {"cpu_load_norm": v, "mem_used_frac": v, "net_load_norm": v}
            for a, v in [(1, 1.0), (2, 0.5), (3, 0.0)]
        }
    }
    engine = agent.create_context(5, {1, 2, 3}, parse_scenario(doc), {1: 1, 2: 2})
    ranking = engine.controller.rank_agents(engine.perf_values(), {1, 2, 3})
    assert ranking == [3, 2, 1]

    # Agent 3 ranks best but never attached to the hub
    ctx = ProcessContext(engine.lps[1], 5, 100, 1, engine.services)
    lp_id = engine.services.place_job(ctx, "j1", "dynamic_job", {"work": 5})
    assert engine.state.routes[lp_id] == 2
    assert engine.placed == {2: 1}

    [event] = ctx.emitted
    assert event.kind == EventKind.START_NEW_JOB
    assert (event.dst_lp, event.timestamp) == (lp_id, 101)

    with pytest.raises(PlacementError):
        engine.services.place_job(ctx, "j1", "dynamic_job", {"work": 5})
    agent.destroy_context(5)
