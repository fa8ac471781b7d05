"""The simulation agent: hosts the logical processes of any number of
simulation contexts, one engine thread per context.

Frames reach :meth:`SimulationAgent.route_message` from the transport. Control
frames (CONTEXT_CREATE, CONTEXT_DESTROY, PERF_PUBLISH, HEARTBEAT, NACK) are
handled on the spot; synchronization frames are queued to the inbox of their
context's engine, which is the only thread touching that context's state.
"""

import logging
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Union

from .abc import (
    AbstractContextServices,
    AbstractMetricsSource,
    AbstractProcess,
    AbstractSimulationAgent,
    AbstractTransport,
)
from .components import ComponentBase, JobSchedulerDirectory, ReplicaTable
from .controller import PlacementController
from .events import (
    FRAMEWORK_SOURCE,
    EventKey,
    EventKind,
    LogicalProcess,
    LpState,
    ProcessContext,
    SimEvent,
    WorkerPool,
    encode_payload,
    lp_transition,
)
from .exception import (
    CodecError,
    ConfigError,
    ContextError,
    DeadlockError,
    GridSimError,
    PlacementError,
    RoutingError,
    RunAbortedError,
)
from .metrics import HostMetrics, PerformancePublisher, SyntheticMetrics, metrics_source
from .models import build_process
from .placement import DEFAULT_STALE_TTL, DEFAULT_WEIGHTS, PerfValue, Weights
from .registry import HeartbeatLoop, RegistryClient
from .scenario import ScenarioConfig, parse_scenario
from .sync import (
    StepStatus,
    SyncMessage,
    SyncState,
    detect_deadlock,
    handle_message,
    step,
)
from .transport import TcpTransport
from .typings import AgentId, ContextId, Json, LpId, RouteTable
from .utils import add_ticks, fingerprint, logger
from .wire import (
    SYNC_TYPES,
    Frame,
    MsgType,
    decode_frame,
    encode_frame,
    frame_to_sync,
    sync_to_frame,
)

# Records and trace entries per RESULT frame
RESULT_CHUNK = 2000
PROGRESS_PERIOD = 0.25


@dataclass
class AgentConfig:
    """Runtime settings of a simulation agent.

    Every field can be set from a ``GRID_DSIM_*`` environment variable through
    :meth:`from_env`.
    """

    listen: str = "127.0.0.1:0"
    registry: Optional[str] = None
    peers_file: Optional[str] = None
    heartbeat: float = 5.0
    ttl: float = 15.0
    publish_period: float = 5.0
    workers: int = 4
    lookahead: int = 1
    deadlock_timeout: float = 5.0
    weights: Weights = DEFAULT_WEIGHTS
    stale_ttl: float = DEFAULT_STALE_TTL
    metrics: str = "synthetic"
    reuse_lps: bool = False

    @classmethod
    def from_env(cls, environ: Optional[Mapping[str, str]] = None) -> "AgentConfig":
        env = os.environ if environ is None else environ
        kwargs: Dict[str, Any] = {}
        for f in fields(cls):
            key = f"GRID_DSIM_{f.name.upper()}"
            if key not in env:
                continue

            raw = env[key]
            try:
                if f.name == "weights":
                    w1, w2, w3, w4 = (float(w) for w in raw.split(","))
                    kwargs[f.name] = (w1, w2, w3, w4)
                elif f.name == "reuse_lps":
                    kwargs[f.name] = raw.lower() in ("1", "true", "yes")
                elif f.name in ("workers", "lookahead"):
                    kwargs[f.name] = int(raw)
                elif f.name in ("listen", "registry", "peers_file", "metrics"):
                    kwargs[f.name] = raw
                else:
                    kwargs[f.name] = float(raw)
            except ValueError as e:
                raise ConfigError(f"Invalid {key}={raw!r}: {e}")

        return cls(**kwargs)


####################
# Context factory  #
####################


def derive_context_id(scenario_hash: str, seed: int, attempt: int = 0) -> ContextId:
    """Context id of a run: stable for a given scenario and seed, so the same
    run exports the same records whatever else the agents are doing."""
    text = f"{scenario_hash}:{seed}"
    if attempt:
        text = f"{text}:{attempt}"
    return fingerprint(text) or 1


class ContextFactory:
    """Allocates context ids and tracks the active contexts with their
    participants. Allocation is serialized."""

    def __init__(self) -> None:
        self.active: Dict[ContextId, FrozenSet[AgentId]] = {}
        self.__lock = threading.Lock()

    def __contains__(self, context_id: object) -> bool:
        return context_id in self.active

    def allocate(
        self,
        scenario_hash: str,
        seed: int,
        participants: Iterable[AgentId],
        taken: Iterable[ContextId] = (),
    ) -> ContextId:
        excluded = set(taken)
        with self.__lock:
            attempt = 0
            cid = derive_context_id(scenario_hash, seed)
            while cid in self.active or cid in excluded:
                attempt += 1
                cid = derive_context_id(scenario_hash, seed, attempt)
            self.active[cid] = frozenset(participants)
            return cid

    def add(self, context_id: ContextId, participants: Iterable[AgentId]) -> None:
        with self.__lock:
            if context_id in self.active:
                raise ContextError(f"Context {context_id} already exists")
            self.active[context_id] = frozenset(participants)

    def release(self, context_id: ContextId) -> bool:
        with self.__lock:
            return self.active.pop(context_id, None) is not None


###########
# Engine  #
###########


class ContextServices(AbstractContextServices):
    """Job placement and replica access for the LPs of one context."""

    def __init__(self, engine: "ContextEngine") -> None:
        self.engine = engine

    def replica(self, component_id: str) -> Optional[ComponentBase]:
        return self.engine.replicas.get(component_id)

    def place_job(
        self, ctx: ProcessContext, job_id: str, kind: str, params: Json
    ) -> LpId:
        """Pick the agent hosting a new job LP and send it START_NEW_JOB.

        Agents are tried best first; an unreachable one is skipped.

        :raise grid_dsim.exception.PlacementError: If no participant can host
            the job, or the job was already placed.
        """
        e = self.engine
        lp_id = fingerprint(f"{ctx.lp_id}/{job_id}") or 1
        if lp_id in e.state.routes:
            m = f"Job {job_id} of LP {ctx.lp_id} was already placed"
            raise PlacementError(m, agent=e.agent_id, virtual_time=ctx.now)

        ranking = e.controller.rank_agents(e.perf_values(), set(e.participants))
        chosen = None
        for agent in ranking:
            if agent not in e.participants:
                continue
            if agent == e.agent_id or e.agent.transport.reachable(agent):
                chosen = agent
                break
            logger.warning(f"Agent {agent} unreachable, trying the next one")

        if chosen is None:
            m = f"No participant can host job {job_id}"
            raise PlacementError(m, agent=e.agent_id, virtual_time=ctx.now)

        try:
            e.jobs.register(job_id, {"lp": lp_id, "agent": chosen, "kind": kind})
        except ConfigError as err:
            raise PlacementError(err.message, agent=e.agent_id, virtual_time=ctx.now)

        e.state.routes[lp_id] = chosen
        e.placed[chosen] = e.placed.get(chosen, 0) + 1
        payload = {"process": kind, "params": params, "job": job_id}
        ctx.send(
            lp_id, add_ticks(ctx.now, ctx.lookahead), payload, EventKind.START_NEW_JOB
        )
        logger.debug(f"Context {e.context_id}: job {job_id} -> agent {chosen}")
        return lp_id


class ContextEngine:
    """State and engine loop of one simulation context on one agent.

    :param agent: The hosting agent.
    :type agent: grid_dsim.agent.SimulationAgent
    :param context_id: The context.
    :type context_id: int
    :param scenario: The resolved scenario of the run.
    :type scenario: grid_dsim.scenario.ScenarioConfig
    :param routes: Agent hosting every static LP.
    :type routes: Dict[int, int]
    :param participants: Agents taking part in the context.
    :type participants: Set[int]
    :param client: The endpoint RESULT frames are sent to.
    :type client: int
    """

    def __init__(
        self,
        agent: "SimulationAgent",
        context_id: ContextId,
        scenario: ScenarioConfig,
        routes: RouteTable,
        participants: Set[AgentId],
        client: AgentId = 0,
    ) -> None:
        self.agent = agent
        self.agent_id = agent.agent_id
        self.context_id = context_id
        self.scenario = scenario
        self.client = client
        self.participants = frozenset(participants)

        missing = [lp for lp in scenario.lp_ids if routes.get(lp) not in participants]
        if missing:
            raise ContextError(f"LPs {missing} have no participating host")

        remotes = set(self.participants) - {self.agent_id}
        self.state = SyncState(
            self.agent_id,
            context_id,
            remotes,
            dict(routes),
            scenario.horizon,
            scenario.lookahead,
        )
        self.pool = WorkerPool(agent.config.workers)
        self.replicas = ReplicaTable()
        self.jobs = JobSchedulerDirectory()
        self.services = ContextServices(self)
        self.controller = PlacementController(
            scenario.weights, stale_ttl=agent.config.stale_ttl
        )

        self.lps: Dict[LpId, LogicalProcess] = {}
        self.lp_events: Dict[LpId, int] = {}
        self.record_seq: Dict[LpId, int] = {}
        self.records: List[Json] = []
        self.trace: Optional[List[List[int]]] = [] if scenario.trace else None
        self.placed: Dict[AgentId, int] = {}

        self.inbox: "queue.Queue[Any]" = queue.Queue()
        self.last_heard = {r: time.monotonic() for r in remotes}
        self.reported = False
        self.failed = False
        self.__last_report = 0.0
        self.__stopped = threading.Event()
        self.__thread: Optional[threading.Thread] = None

        for spec in scenario.processes:
            if routes[spec.lp_id] == self.agent_id:
                self.add_lp(spec.lp_id, build_process(spec.kind, spec.params))

    @property
    def remotes(self) -> Set[AgentId]:
        return self.state.remotes

    def add_lp(self, lp_id: LpId, behavior: AbstractProcess) -> LogicalProcess:
        lp = LogicalProcess(lp_id, behavior)
        lp.seed(self.scenario.seed)
        self.lps[lp_id] = lp
        self.lp_events[lp_id] = 0
        return lp

    def hosted(self) -> List[LogicalProcess]:
        """Distinct LPs hosted here (reused LPs answer to several ids)."""
        unique = {id(lp): lp for lp in self.lps.values()}
        return sorted(unique.values(), key=lambda lp: lp.id)

    def perf_values(self) -> List[PerfValue]:
        if self.scenario.metrics_mode == "synthetic":
            values = []
            for a in sorted(self.participants):
                s = self.scenario.samples.get(a)
                s = s if s is not None else SyntheticMetrics().sample()
                s = s.with_lp_count(s.lp_count + self.placed.get(a, 0))
                values.append(self.controller.performance_value(s, a))
            return values

        known = dict(self.agent.perf)
        return [known[a] for a in sorted(self.participants) if a in known]

    #############
    # Lifecycle #
    #############

    def start(self) -> None:
        for lp_id in sorted(self.lps):
            key = EventKey(0, FRAMEWORK_SOURCE, lp_id)
            start = encode_payload({"op": "start"})
            self.state.schedule_local(
                SimEvent(key, self.context_id, FRAMEWORK_SOURCE, lp_id, payload=start)
            )

        end = EventKey(self.scenario.horizon, FRAMEWORK_SOURCE, 0)
        self.state.schedule_local(
            SimEvent(end, self.context_id, FRAMEWORK_SOURCE, 0, EventKind.END_OF_RUN)
        )

        self.__thread = threading.Thread(
            target=self.run, name=f"ctx-{self.context_id}@{self.agent_id}", daemon=True
        )
        self.__thread.start()

    def stop(self) -> None:
        self.__stopped.set()
        self.inbox.put(None)
        thread = self.__thread
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout=2.0)

    def post(self, item: Any) -> None:
        self.inbox.put(item)

    ########
    # Loop #
    ########

    def run(self) -> None:
        try:
            while not self.__stopped.is_set() and not self.failed:
                if self.state.finished:
                    if not self.reported:
                        self.finish()
                    self.drain(timeout=0.5)
                    continue

                self.drain()
                outcome = step(self.state, self.dispatch)
                self.emit(outcome.outgoing)
                if outcome.status == StepStatus.PROCESSED:
                    self.progress()
                    continue
                if outcome.status == StepStatus.FINISHED:
                    continue

                self.check_liveness()
                self.drain(timeout=0.05)
        except GridSimError as e:
            self.abort(e)
        except Exception as e:
            logger.exception(f"Agent {self.agent_id} ctx {self.context_id} crashed")
            m = f"{type(e).__name__}: {e}"
            self.abort(RunAbortedError(m, self.agent_id, self.state.local_clock))

    def drain(self, timeout: Optional[float] = None) -> None:
        """Handle queued messages; with **timeout**, wait that long for one."""
        block = timeout is not None
        while True:
            try:
                item = self.inbox.get(block=block, timeout=timeout)
            except queue.Empty:
                return
            block = False

            if item is None:
                self.__stopped.set()
                return
            if isinstance(item, SyncMessage):
                self.last_heard[item.sender] = time.monotonic()
                self.emit(handle_message(self.state, item))
            elif isinstance(item, tuple) and item[0] == "heartbeat":
                if item[1] in self.last_heard:
                    self.last_heard[item[1]] = time.monotonic()

    def emit(self, outgoing: List[SyncMessage]) -> None:
        for m in outgoing:
            self.agent.send(m.recipient, sync_to_frame(m))

    def check_liveness(self) -> None:
        reason = detect_deadlock(self.state, self.agent.config.deadlock_timeout)
        if reason is not None:
            raise DeadlockError(reason, self.agent_id, self.state.local_clock)

        now = time.monotonic()
        for r in sorted(self.last_heard):
            silent = now - self.last_heard[r]
            if silent > self.agent.config.ttl:
                m = f"Agent {r} silent for {silent:.1f}s"
                raise RunAbortedError(m, self.agent_id, self.state.local_clock)

    ############
    # Dispatch #
    ############

    def dispatch(self, e: SimEvent) -> List[SimEvent]:
        if e.kind == EventKind.STATE_UPDATE:
            self.replicas.apply(e.data())

        lp = self.lps.get(e.dst_lp)
        if lp is None:
            if e.kind != EventKind.START_NEW_JOB:
                m = f"LP {e.dst_lp} is not hosted here"
                raise RoutingError(m, self.agent_id, e.timestamp)
            lp = self.spawn(e)

        if lp.state == LpState.FINISHED:
            logger.debug(f"Dropping {tuple(e.key)} for finished LP {lp.id}")
            return []

        if self.trace is not None:
            self.trace.append([*e.key, e.dst_lp])

        if lp.state in (LpState.CREATED, LpState.WAITING):
            lp_transition(lp, LpState.READY, self.pool)
        lp_transition(lp, LpState.RUNNING, self.pool)
        lp.deliver(e.key)

        ctx = ProcessContext(
            lp, self.context_id, e.timestamp, self.scenario.lookahead, self.services
        )
        lp.behavior.handle(ctx, e)
        self.lp_events[lp.id] += 1
        done = LpState.FINISHED if ctx.finished else LpState.WAITING
        lp_transition(lp, done, self.pool)
        self.collect(ctx)

        emitted = list(ctx.emitted)
        for key in ctx.cancelled:
            pending = [x for x in emitted if x.key == key]
            if pending:
                emitted.remove(pending[0])
            elif not self.state.local_queue.cancel(key):
                logger.debug(f"LP {lp.id}: nothing to cancel at {tuple(key)}")

        return emitted

    def spawn(self, e: SimEvent) -> LogicalProcess:
        data = e.data()
        kind = str(data["process"])
        if self.agent.config.reuse_lps:
            for lp in self.hosted():
                idle = lp.state != LpState.FINISHED and lp.behavior.is_idle()
                if lp.behavior.kind == kind and idle:
                    logger.debug(f"Job {data.get('job')} reuses LP {lp.id}")
                    self.lps[e.dst_lp] = lp
                    self.state.routes[e.dst_lp] = self.agent_id
                    return lp

        lp = self.add_lp(e.dst_lp, build_process(kind, data.get("params")))
        self.state.routes[e.dst_lp] = self.agent_id
        return lp

    def collect(self, ctx: ProcessContext) -> None:
        for metric, value, tags in ctx.records:
            seq = self.record_seq.get(ctx.lp_id, 0)
            self.record_seq[ctx.lp_id] = seq + 1
            self.records.append(
                {
                    "metric": metric,
                    "vt": ctx.now,
                    "value": value,
                    "tags": tags,
                    "lp": ctx.lp_id,
                    "seq": seq,
                }
            )

    ###########
    # Results #
    ###########

    def report(self, kind: str, body: Optional[Json] = None) -> None:
        doc = {"kind": kind, "agent": self.agent_id, **(body or {})}
        self.agent.send(self.client, encode_frame(MsgType.RESULT, self.context_id, doc))

    def progress(self) -> None:
        now = time.monotonic()
        if now - self.__last_report < PROGRESS_PERIOD:
            return
        self.__last_report = now
        vt, events = self.state.local_clock, self.state.events_processed
        self.report("progress", {"vt": vt, "events": events})

    def finish(self) -> None:
        """Finalize the local LPs at the horizon and send every result home."""
        for lp in self.hosted():
            ctx = ProcessContext(
                lp, self.context_id, self.scenario.horizon, 0, self.services
            )
            lp.behavior.finalize(ctx)
            if ctx.emitted:
                logger.warning(f"LP {lp.id} emitted events while finalizing")
            ctx.record("events_processed", self.lp_events[lp.id], lp=lp.id)
            self.collect(ctx)

        for i in range(0, len(self.records), RESULT_CHUNK):
            self.report("records", {"records": self.records[i : i + RESULT_CHUNK]})

        trace = self.trace or []
        for i in range(0, len(trace), RESULT_CHUNK):
            self.report("trace", {"trace": trace[i : i + RESULT_CHUNK]})

        s = self.state
        self.report(
            "finished",
            {
                "events_processed": s.events_processed,
                "sync_messages_sent": s.sync_messages_sent,
                "sync_messages_received": s.sync_messages_received,
                "requests_sent": s.requests_sent,
                "responses_sent": s.responses_sent,
                "blocking_episodes": s.blocking_episodes,
                "lps": len(self.hosted()),
            },
        )
        self.reported = True
        logger.info(
            f"Agent {self.agent_id} ctx {self.context_id}: finished at "
            f"{self.scenario.horizon} after {s.events_processed} events"
        )

    def abort(self, e: GridSimError) -> None:
        self.failed = True
        vt = e.virtual_time if e.virtual_time is not None else self.state.local_clock
        agent = e.agent if e.agent is not None else self.agent_id
        logger.error(f"Agent {self.agent_id} ctx {self.context_id}: {e}")

        kind = type(e).__name__
        record = {
            "metric": "diagnostic",
            "vt": vt,
            "value": 1.0,
            "tags": {
                "kind": kind,
                "agent": str(agent),
                "virtual_time": str(vt),
                "message": e.message,
            },
            "lp": 0,
            "seq": 0,
        }
        body = {
            "error": kind,
            "exit_code": e.exit_code,
            "message": e.message,
            "origin": agent,
            "virtual_time": vt,
            "record": record,
        }
        try:
            self.report("diagnostic", body)
        except GridSimError as err:
            logger.error(f"Cannot report the failure to the client: {err}")


#########
# Agent #
#########


class SimulationAgent(AbstractSimulationAgent):
    """A simulation agent.

    :param agent_id: Unique, positive id of the agent (0 is the client).
    :type agent_id: int
    :param transport: How frames reach the other agents. Defaults to TCP on
        **config.listen**.
    :type transport: grid_dsim.abc.AbstractTransport | None
    :param config: Runtime settings. Defaults to :meth:`AgentConfig.from_env`.
    :type config: grid_dsim.agent.AgentConfig | None
    :param metrics: Source of the published performance value.
    :type metrics: grid_dsim.abc.AbstractMetricsSource | None
    :param logging_lvl: Package log level.
    :type logging_lvl: str | int
    """

    def __init__(
        self,
        agent_id: AgentId,
        transport: Optional[AbstractTransport] = None,
        config: Optional[AgentConfig] = None,
        metrics: Optional[AbstractMetricsSource] = None,
        logging_lvl: Union[str, int] = logging.INFO,
    ) -> None:
        if isinstance(agent_id, bool) or not isinstance(agent_id, int):
            raise TypeError("Invalid agent_id type: must be int")
        if agent_id < 1:
            raise ValueError(f"Invalid agent_id {agent_id}: must be positive")
        if transport is not None and not isinstance(transport, AbstractTransport):
            raise TypeError("Invalid transport type")

        self.set_logging(logging_lvl)
        self.agent_id = agent_id
        self.config = config if config is not None else AgentConfig.from_env()
        self.transport = transport or TcpTransport(self.config.listen)

        if metrics is None:
            # "synthetic", "host" or "replay:<path>"
            mode, _, path = self.config.metrics.partition(":")
            if mode == "host":
                metrics = HostMetrics(lp_count=lambda: self.lp_count)
            else:
                metrics = metrics_source(mode, path=path)
        self.metrics = metrics
        self.publisher = PerformancePublisher(
            agent_id, metrics, self.config.weights, self.config.publish_period
        )

        self.factory = ContextFactory()
        self.contexts: Dict[ContextId, ContextEngine] = {}
        self.perf: Dict[AgentId, PerfValue] = {}
        self.heartbeats: Optional[HeartbeatLoop] = None
        self.__lock = threading.RLock()
        self.__stop = threading.Event()

    def set_logging(self, level: Union[int, str]) -> None:
        logger.setLevel(level)

    @property
    def address(self) -> str:
        if isinstance(self.transport, TcpTransport):
            return self.transport.address
        return f"local:{self.agent_id}"

    @property
    def lp_count(self) -> int:
        with self.__lock:
            return sum(len(e.hosted()) for e in self.contexts.values())

    def engine(self, context_id: ContextId) -> Optional[ContextEngine]:
        with self.__lock:
            return self.contexts.get(context_id)

    #############
    # Lifecycle #
    #############

    def start(self) -> "SimulationAgent":
        self.transport.start(self.agent_id, self.route_message)

        if self.config.registry or self.config.peers_file:
            client = RegistryClient(self.config.registry, self.config.peers_file)
            self.heartbeats = HeartbeatLoop(
                client, self.agent_id, self.address, self.config.heartbeat
            )
            self.heartbeats.start()

        self.publisher.start(self.__on_perf)
        self.__stop.clear()
        threading.Thread(target=self.__liveness_loop, daemon=True).start()
        logger.info(f"Agent {self.agent_id} started ({self.address})")
        return self

    def stop(self) -> None:
        self.__stop.set()
        for cid in list(self.contexts):
            self.destroy_context(cid)
        self.publisher.stop()
        if self.heartbeats is not None:
            self.heartbeats.stop()
        self.transport.stop()
        logger.info(f"Agent {self.agent_id} stopped")

    def __liveness_loop(self) -> None:
        while not self.__stop.wait(self.config.heartbeat):
            with self.__lock:
                engines = list(self.contexts.values())
            for e in engines:
                if e.failed or e.state.finished:
                    continue
                body = {"agent": self.agent_id}
                frame = encode_frame(MsgType.HEARTBEAT, e.context_id, body)
                for r in sorted(e.remotes):
                    try:
                        self.send(r, frame)
                    except GridSimError as err:
                        logger.debug(f"Heartbeat to agent {r} failed: {err}")

    ###############
    # Performance #
    ###############

    def __on_perf(self, value: PerfValue) -> None:
        self.perf[self.agent_id] = value
        if self.heartbeats is not None:
            self.heartbeats.perf = value

        with self.__lock:
            peers = set().union(*(e.remotes for e in self.contexts.values()))

        body = {"agent": self.agent_id, "perf": asdict(value)}
        frame = encode_frame(MsgType.PERF_PUBLISH, 0, body)
        for r in sorted(peers):
            try:
                self.send(r, frame)
            except GridSimError as err:
                logger.debug(f"Publishing to agent {r} failed: {err}")

    def publish_performance(self) -> PerfValue:
        value = self.publisher.publish()
        self.__on_perf(value)
        return value

    ############
    # Contexts #
    ############

    def create_context(
        self,
        context_id: ContextId,
        participants: Set[AgentId],
        scenario: Union[ScenarioConfig, Json],
        routes: Optional[RouteTable] = None,
        client: AgentId = 0,
    ) -> ContextEngine:
        """Prepare a context: build the local LPs, but process nothing until
        :meth:`start_context`.

        :raise grid_dsim.exception.ContextError: If the context exists, or this
            agent is not one of its participants.
        """
        if self.agent_id not in participants:
            m = f"Agent {self.agent_id} is not a participant of {context_id}"
            raise ContextError(m)

        if not isinstance(scenario, ScenarioConfig):
            doc = dict(scenario)
            doc.setdefault("lookahead", self.config.lookahead)
            scenario = parse_scenario(doc)

        if routes is None:
            agents = sorted(participants)
            routes = {
                lp: agents[i % len(agents)] for i, lp in enumerate(scenario.lp_ids)
            }

        self.factory.add(context_id, participants)
        try:
            engine = ContextEngine(
                self, context_id, scenario, routes, set(participants), client
            )
        except Exception:
            self.factory.release(context_id)
            raise

        with self.__lock:
            self.contexts[context_id] = engine

        logger.info(
            f"Agent {self.agent_id}: context {context_id} ({scenario.name}) "
            f"prepared with {len(engine.lps)} local LPs"
        )
        return engine

    def start_context(self, context_id: ContextId) -> None:
        engine = self.engine(context_id)
        if engine is None:
            raise ContextError(f"Unknown context {context_id}", agent=self.agent_id)
        engine.start()

    def destroy_context(self, context_id: ContextId) -> None:
        with self.__lock:
            engine = self.contexts.pop(context_id, None)
        if engine is None:
            return

        engine.stop()
        self.factory.release(context_id)
        logger.info(f"Agent {self.agent_id}: context {context_id} destroyed")

    ###########
    # Routing #
    ###########

    def send(self, dst: AgentId, frame: bytes) -> None:
        self.transport.send(dst, frame)

    def nack(self, dst: AgentId, frame: Frame, reason: str) -> None:
        body = {
            "agent": self.agent_id,
            "msg_type": int(frame.msg_type),
            "reason": reason,
        }
        try:
            self.send(dst, encode_frame(MsgType.NACK, frame.context_id, body))
        except GridSimError as e:
            logger.debug(f"Cannot NACK agent {dst}: {e}")

    def route_message(self, frame: bytes) -> None:
        """Deliver one received frame. Never raises: bad frames are logged
        and skipped, frames for unknown contexts are NACKed."""
        try:
            f = decode_frame(frame)
        except CodecError as e:
            logger.error(f"Agent {self.agent_id}: skipping malformed frame: {e}")
            return

        if f.msg_type in SYNC_TYPES:
            try:
                m = frame_to_sync(f)
            except CodecError as e:
                logger.error(f"Agent {self.agent_id}: skipping malformed frame: {e}")
                return

            engine = self.engine(f.context_id)
            if engine is None:
                logger.warning(
                    f"Agent {self.agent_id}: {f.msg_type.name} for unknown "
                    f"context {f.context_id} from agent {m.sender}"
                )
                self.nack(m.sender, f, "unknown context")
                return

            engine.post(m)
            return

        try:
            self.__control(f)
        except (GridSimError, KeyError, TypeError, ValueError) as e:
            logger.error(f"Agent {self.agent_id}: bad {f.msg_type.name} frame: {e}")

    def __control(self, f: Frame) -> None:
        body = f.body
        if f.msg_type == MsgType.CONTEXT_CREATE:
            self.__on_create(f)
        elif f.msg_type == MsgType.CONTEXT_DESTROY:
            self.destroy_context(f.context_id)
        elif f.msg_type == MsgType.PERF_PUBLISH:
            self.perf[int(body["agent"])] = PerfValue(**body["perf"])
        elif f.msg_type == MsgType.HEARTBEAT:
            engine = self.engine(f.context_id)
            if engine is not None:
                engine.post(("heartbeat", int(body["agent"])))
        elif f.msg_type == MsgType.NACK:
            level = logging.DEBUG
            if body.get("msg_type") != MsgType.HEARTBEAT:
                level = logging.WARNING
            logger.log(
                level,
                f"Agent {self.agent_id}: NACK from agent {body.get('agent')} "
                f"for context {f.context_id}: {body.get('reason')}",
            )
        elif f.msg_type == MsgType.REGISTER:
            logger.debug(f"Agent {self.agent_id}: hello from {body}")
        else:
            logger.warning(f"Agent {self.agent_id}: unexpected {f.msg_type.name}")

    def __on_create(self, f: Frame) -> None:
        body = f.body
        client = body.get("client", {})
        client_id = int(client.get("id", 0))
        phase = body.get("phase")

        if isinstance(self.transport, TcpTransport):
            if client.get("address"):
                self.transport.add_peer(client_id, str(client["address"]))
            for aid, address in body.get("peers", {}).items():
                if int(aid) != self.agent_id:
                    self.transport.add_peer(int(aid), str(address))

        existed = f.context_id in self.factory
        reply: Json = {"kind": "ack", "phase": phase, "agent": self.agent_id}
        try:
            if phase == "prepare":
                routes = {int(k): int(v) for k, v in body["routes"].items()}
                participants = {int(a) for a in body["participants"]}
                self.create_context(
                    f.context_id, participants, body["scenario"], routes, client_id
                )
            elif phase == "start":
                self.start_context(f.context_id)
            else:
                raise ContextError(f"Unknown CONTEXT_CREATE phase {phase!r}")
        except GridSimError as e:
            error = type(e).__name__
            if phase == "prepare" and existed:
                error = "exists"
            reply = {
                "kind": "nack",
                "phase": phase,
                "agent": self.agent_id,
                "error": error,
                "message": e.message,
            }
            logger.warning(f"Agent {self.agent_id}: cannot {phase} {f.context_id}: {e}")

        self.send(client_id, encode_frame(MsgType.RESULT, f.context_id, reply))
