"""The client: deploys a scenario on a set of agents, collects the results
streamed back and builds the result pool of the run."""

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

from rich.console import Console

from .abc import AbstractTransport
from .agent import AgentConfig, ContextFactory, SimulationAgent
from .controller import PlacementController
from .exception import (
    EXIT_DEADLOCK,
    EXIT_OK,
    ContextError,
    DeadlockError,
    GridSimError,
    PlacementError,
    RegistryError,
    RunAbortedError,
)
from .placement import PerfSample
from .registry import RegistryClient
from .results import ResultPool, ResultRecord, export_results, record_result
from .scenario import ScenarioConfig
from .transport import LoopbackHub, LoopbackTransport, TcpTransport
from .typings import AgentId, ContextId, Json, LpId, RouteTable
from .utils import get_run_progress, logger
from .wire import Frame, MsgType, decode_frame, encode_frame

CLIENT_ID = 0
MAX_CREATE_ATTEMPTS = 8

TraceEntry = Tuple[int, int, int, int]


def plan_routes(
    config: ScenarioConfig,
    agents: Sequence[AgentId],
    controller: Optional[PlacementController] = None,
) -> RouteTable:
    """Choose the agent hosting every LP of **config**.

    Per-process pins are always honored. The rest are dealt round-robin in id
    order, or, with ``"placement": "scheduler"``, placed one after the other
    by the placement controller from the scenario's metrics samples.

    :raise grid_dsim.exception.PlacementError: If a pin names an unknown
        agent, or there is no agent at all.
    """
    candidates = sorted(set(agents))
    if not candidates:
        raise PlacementError("No agents to run the scenario on")

    routes: RouteTable = {}
    free: List[LpId] = []
    for p in config.processes:
        if p.agent is None:
            free.append(p.lp_id)
        elif p.agent not in candidates:
            m = f"Process {p.lp_id} is pinned to unknown agent {p.agent}"
            raise PlacementError(m)
        else:
            routes[p.lp_id] = p.agent

    if config.placement == "scheduler" and free:
        controller = controller or PlacementController(config.weights)
        samples = {a: config.samples.get(a, PerfSample()) for a in candidates}
        routes.update(controller.plan(free, samples))
    else:
        for i, lp in enumerate(free):
            routes[lp] = candidates[i % len(candidates)]

    return routes


@dataclass
class RunResult:
    """Outcome of one run. **trace** holds each agent's processed events in the
    order that agent processed them; chunks from different agents are
    interleaved as they arrive."""

    context_id: ContextId
    pool: ResultPool
    trace: List[TraceEntry] = field(default_factory=list)
    agents: Dict[AgentId, Json] = field(default_factory=dict)
    error: Optional[GridSimError] = None

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.error is None else self.error.exit_code

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def manifest(self) -> Json:
        return self.pool.manifest

    @property
    def events_processed(self) -> int:
        return sum(int(a.get("events_processed", 0)) for a in self.agents.values())

    @property
    def sync_messages(self) -> int:
        return sum(int(a.get("sync_messages_sent", 0)) for a in self.agents.values())

    def counter(self, name: str) -> int:
        return sum(int(a.get(name, 0)) for a in self.agents.values())

    def raise_for_status(self) -> "RunResult":
        if self.error is not None:
            raise self.error
        return self


class _Run:
    """Frames of one context, as received by the client."""

    def __init__(self, context_id: ContextId) -> None:
        self.context_id = context_id
        self.frames: "queue.Queue[Frame]" = queue.Queue()


class Client:
    """Starts simulation runs and gathers their results.

    Several runs may be in flight at once, each in its own thread.

    :param transport: The client's endpoint; it joins the agents as id 0.
    :type transport: grid_dsim.abc.AbstractTransport
    :param controller: Placement controller used by ``"scheduler"`` scenarios.
    :type controller: grid_dsim.controller.PlacementController | None
    :param create_timeout: Seconds to wait for every agent to prepare a context.
    :type create_timeout: float
    :param logging_lvl: Package log level.
    :type logging_lvl: str | int
    """

    def __init__(
        self,
        transport: AbstractTransport,
        controller: Optional[PlacementController] = None,
        create_timeout: float = 10.0,
        logging_lvl: Union[str, int] = logging.INFO,
    ) -> None:
        if not isinstance(transport, AbstractTransport):
            raise TypeError("Invalid transport type")

        self.set_logging(logging_lvl)
        self.transport = transport
        self.controller = controller
        self.create_timeout = create_timeout
        self.factory = ContextFactory()
        self.__runs: Dict[ContextId, _Run] = {}
        self.__lock = threading.Lock()
        self.__started = False

    def set_logging(self, level: Union[int, str]) -> None:
        logger.setLevel(level)

    @property
    def address(self) -> Optional[str]:
        if isinstance(self.transport, TcpTransport):
            return self.transport.address
        return None

    def start(self) -> "Client":
        if not self.__started:
            self.transport.start(CLIENT_ID, self.__deliver)
            self.__started = True
        return self

    def stop(self) -> None:
        if self.__started:
            self.transport.stop()
            self.__started = False

    def __deliver(self, frame: bytes) -> None:
        try:
            f = decode_frame(frame)
        except GridSimError as e:
            logger.error(f"Client: skipping malformed frame: {e}")
            return

        with self.__lock:
            run = self.__runs.get(f.context_id)

        if run is None:
            logger.debug(f"Client: {f.msg_type.name} for unknown ctx {f.context_id}")
            return

        run.frames.put(f)

    def __send_all(
        self, agents: Sequence[AgentId], msg_type: MsgType, cid: ContextId, body: Json
    ) -> Tuple[List[AgentId], Optional[Json]]:
        """Send one frame to each of **agents**, stopping at the first failure.

        :return: The agents the frame reached, and the failure if any.
        """
        frame = encode_frame(msg_type, cid, body)
        sent: List[AgentId] = []
        for a in agents:
            try:
                self.transport.send(a, frame)
            except GridSimError as e:
                failure: Json = {"error": type(e).__name__, "message": e.message}
                failure["agent"] = a
                return sent, failure
            sent.append(a)
        return sent, None

    def __destroy(self, agents: Sequence[AgentId], cid: ContextId) -> None:
        for a in agents:
            try:
                self.transport.send(a, encode_frame(MsgType.CONTEXT_DESTROY, cid, {}))
            except GridSimError as e:
                logger.warning(f"Cannot destroy context {cid} on agent {a}: {e}")

    ############
    # Creation #
    ############

    def __await_phase(
        self, run: _Run, agents: Sequence[AgentId], phase: str
    ) -> Tuple[Set[AgentId], Set[AgentId], Optional[Json]]:
        """Wait until every agent answered **phase** or the creation timeout
        expires.

        :return: The agents that acknowledged, the agents that never answered,
            and the first refusal if any.
        """
        acked: Set[AgentId] = set()
        answered: Set[AgentId] = set()
        refusal: Optional[Json] = None
        deadline = time.monotonic() + self.create_timeout
        while answered != set(agents):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = sorted(set(agents) - answered)
                if refusal is None:
                    refusal = {"error": "timeout", "message": f"No answer: {missing}"}
                break
            try:
                f = run.frames.get(timeout=remaining)
            except queue.Empty:
                continue

            body = f.body
            if f.msg_type != MsgType.RESULT or body.get("phase") != phase:
                continue
            agent = int(body.get("agent", 0))
            if body.get("kind") == "nack":
                answered.add(agent)
                refusal = refusal or body
            elif body.get("kind") == "ack":
                answered.add(agent)
                acked.add(agent)

        return acked, set(agents) - answered, refusal

    def create_context(
        self,
        config: ScenarioConfig,
        routes: RouteTable,
        peers: Mapping[AgentId, str],
    ) -> Tuple[ContextId, _Run]:
        """Two-phase creation: every participant prepares the context, then
        all of them start it. If either phase fails, the context is destroyed
        on every agent that prepared it or left the prepare unanswered; an
        agent refusing because the id is taken keeps its own context.

        :raise grid_dsim.exception.ContextError: If an agent refuses, cannot be
            reached or does not answer.
        """
        participants = sorted(set(routes.values()))
        scenario_hash = config.scenario_hash()
        taken: Set[ContextId] = set()

        for _ in range(MAX_CREATE_ATTEMPTS):
            cid = self.factory.allocate(scenario_hash, config.seed, participants, taken)
            run = _Run(cid)
            with self.__lock:
                self.__runs[cid] = run

            body = {
                "phase": "prepare",
                "scenario": config.to_json(),
                "routes": {str(lp): a for lp, a in sorted(routes.items())},
                "participants": participants,
                "peers": {str(a): addr for a, addr in sorted(peers.items())},
                "client": {"id": CLIENT_ID, "address": self.address},
            }
            sent, failure = self.__send_all(
                participants, MsgType.CONTEXT_CREATE, cid, body
            )
            prepared, silent, refusal = self.__await_phase(run, sent, "prepare")
            refusal = failure or refusal

            if refusal is None:
                start = {"phase": "start", "client": body["client"]}
                sent, failure = self.__send_all(
                    participants, MsgType.CONTEXT_CREATE, cid, start
                )
                _, _, refusal = self.__await_phase(run, sent, "start")
                refusal = failure or refusal
                if refusal is None:
                    logger.info(f"Context {cid} ({config.name}) on {participants}")
                    return cid, run

            # Silent agents may still prepare after the timeout
            self.__destroy(sorted(prepared | silent), cid)
            self.__forget(cid)
            if refusal.get("error") != "exists":
                m = f"Cannot create context for {config.name}: {refusal.get('message')}"
                raise ContextError(m, agent=refusal.get("agent"))
            taken.add(cid)

        raise ContextError(f"No free context id for {config.name}")

    def __forget(self, cid: ContextId) -> None:
        with self.__lock:
            self.__runs.pop(cid, None)
        self.factory.release(cid)

    #######
    # Run #
    #######

    def run(
        self,
        config: ScenarioConfig,
        agents: Union[Sequence[AgentId], Mapping[AgentId, str]],
        out: Optional[Union[str, Path]] = None,
        progress: bool = False,
        timeout: Optional[float] = None,
    ) -> RunResult:
        """Run **config** on **agents** and collect its results.

        :param config: The scenario.
        :type config: grid_dsim.scenario.ScenarioConfig
        :param agents: Candidate agent ids, or ids mapped to TCP addresses.
        :type agents: Sequence[int] | Mapping[int, str]
        :param out: Directory the results are exported to.
        :type out: str | pathlib.Path | None
        :param progress: Show a progress line while the run is going.
        :type progress: bool
        :param timeout: Wall-clock seconds after which the run is aborted.
        :type timeout: float | None
        :return: The result pool, trace and counters of the run. Failures are
            reported in **RunResult.error** with their exit code.
        :rtype: grid_dsim.client.RunResult
        """
        self.start()
        peers: Dict[AgentId, str] = {}
        if isinstance(agents, Mapping):
            peers = {int(a): str(addr) for a, addr in agents.items()}
            if isinstance(self.transport, TcpTransport):
                for a, addr in peers.items():
                    self.transport.add_peer(a, addr)

        routes = plan_routes(config, list(agents), self.controller)
        participants = sorted(set(routes.values()))
        cid, run = self.create_context(config, routes, peers)

        result = RunResult(cid, ResultPool(cid))
        raw_records: List[ResultRecord] = []
        try:
            result.error = self.__collect(
                run, participants, raw_records, result, progress, timeout
            )
        finally:
            self.__destroy(participants, cid)
            self.__forget(cid)

        for r in sorted(raw_records, key=lambda r: r.order):
            record_result(result.pool, r)

        result.pool.manifest.update(
            {
                "scenario": config.name,
                "scenario_hash": config.scenario_hash(),
                "seed": config.seed,
                "horizon": config.horizon,
                "lookahead": config.lookahead,
                "agents": participants,
                "events_processed": result.events_processed,
                "sync_messages": result.sync_messages,
                "per_agent": {str(a): c for a, c in sorted(result.agents.items())},
                "exit_code": result.exit_code,
            }
        )

        if result.error is not None:
            logger.error(f"Run {config.name} failed: {result.error}")
        else:
            logger.info(
                f"Run {config.name} finished: {result.events_processed} events, "
                f"{len(result.pool)} records"
            )

        if out is not None:
            export_results(result.pool, out)

        return result

    def __collect(
        self,
        run: _Run,
        participants: Sequence[AgentId],
        records: List[ResultRecord],
        result: RunResult,
        progress: bool,
        timeout: Optional[float],
    ) -> Optional[GridSimError]:
        pending = set(participants)
        deadline = None if timeout is None else time.monotonic() + timeout
        vt: Dict[AgentId, int] = {}
        events: Dict[AgentId, int] = {}

        bar = get_run_progress(f"(context {run.context_id})") if progress else None
        task = None
        if bar is not None:
            bar.start()
            task = bar.add_task("", vt=0, events=0)

        try:
            while pending:
                if deadline is not None and time.monotonic() > deadline:
                    return RunAbortedError(f"Run exceeded {timeout}s")
                try:
                    f = run.frames.get(timeout=0.2)
                except queue.Empty:
                    continue

                body = f.body
                kind = body.get("kind")
                agent = int(body.get("agent", 0))
                if f.msg_type != MsgType.RESULT:
                    logger.warning(f"Client: unexpected {f.msg_type.name} from {agent}")
                elif kind == "progress":
                    vt[agent], events[agent] = int(body["vt"]), int(body["events"])
                    if bar is not None and task is not None:
                        total = sum(events.values())
                        bar.update(task, vt=min(vt.values()), events=total)
                elif kind == "records":
                    for doc in body["records"]:
                        records.append(ResultRecord.from_wire(run.context_id, doc))
                elif kind == "trace":
                    result.trace.extend(tuple(e) for e in body["trace"])
                elif kind == "finished":
                    result.agents[agent] = {
                        k: v for k, v in body.items() if k not in ("kind", "agent")
                    }
                    pending.discard(agent)
                elif kind == "diagnostic":
                    record = ResultRecord.from_wire(run.context_id, body["record"])
                    records.append(record)
                    return self.__failure(body)
        finally:
            if bar is not None:
                bar.stop()

        return None

    @staticmethod
    def __failure(body: Json) -> GridSimError:
        deadlock = body.get("exit_code") == EXIT_DEADLOCK
        cls = DeadlockError if deadlock else RunAbortedError
        return cls(
            f"{body.get('error')}: {body.get('message')}",
            agent=body.get("origin"),
            virtual_time=body.get("virtual_time"),
        )


###############
# Local mode  #
###############


class LocalCluster:
    """N agents and a client in one process, wired by a loopback hub.

    >>> with LocalCluster(3) as cluster:
    ...     result = cluster.run(config)
    """

    def __init__(
        self,
        n: int,
        config: Optional[AgentConfig] = None,
        logging_lvl: Union[str, int] = logging.INFO,
    ) -> None:
        if n < 1:
            raise ValueError(f"Invalid agent count: {n}")

        self.hub = LoopbackHub()
        self.config = config if config is not None else AgentConfig()
        self.agents = [
            SimulationAgent(
                i, LoopbackTransport(self.hub), self.config, logging_lvl=logging_lvl
            )
            for i in range(1, n + 1)
        ]
        self.client = Client(LoopbackTransport(self.hub), logging_lvl=logging_lvl)

    @property
    def agent_ids(self) -> List[AgentId]:
        return [a.agent_id for a in self.agents]

    def start(self) -> "LocalCluster":
        for a in self.agents:
            a.start()
        self.client.start()
        return self

    def stop(self) -> None:
        self.client.stop()
        for a in self.agents:
            a.stop()

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    def run(self, scenario: ScenarioConfig, **kwargs: Any) -> RunResult:
        return self.client.run(scenario, self.agent_ids, **kwargs)


def run_scenario(
    config: ScenarioConfig,
    local: Optional[int] = None,
    agents: Optional[Mapping[AgentId, str]] = None,
    registry: Optional[str] = None,
    agent_config: Optional[AgentConfig] = None,
    out: Optional[Union[str, Path]] = None,
    progress: bool = False,
    logging_lvl: Union[str, int] = logging.INFO,
) -> RunResult:
    """Run a scenario end to end.

    The agents are, in order of precedence: **agents** (ids mapped to TCP
    addresses), the live agents of **registry**, the scenario's own
    participant list, and finally **local** (default: the scenario's
    ``local:N``) in-process agents.
    """
    if agents is None and registry is not None:
        entries = RegistryClient(registry).lookup()
        if not entries:
            raise RegistryError(f"No live agents registered at {registry}")
        agents = {e.agent_id: e.address for e in entries}

    agents = agents if agents is not None else (config.agents or None)
    if agents:
        client = Client(TcpTransport(), logging_lvl=logging_lvl)
        try:
            return client.run(config, agents, out=out, progress=progress)
        finally:
            client.stop()

    n = local if local is not None else (config.local or 1)
    with LocalCluster(n, agent_config, logging_lvl) as cluster:
        return cluster.run(config, out=out, progress=progress)


def print_summary(result: RunResult, console: Optional[Console] = None) -> None:
    console = console or Console(stderr=True)
    status = "[green]ok[/green]" if result.ok else f"[red]{result.error}[/red]"
    console.print(
        f"context {result.context_id}: {status}, "
        f"{result.events_processed} events, {len(result.pool)} records, "
        f"{result.sync_messages} sync messages"
    )
