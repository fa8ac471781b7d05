"""Behaviors of the logical processes a scenario is made of.

Every process receives an initial ``{"op": "start"}`` event at virtual time 0.
Grid resources are owned by :class:`CenterProcess` (cpus, database, mass
storage and the local LAN of one regional center) and :class:`NetworkProcess`
(every WAN link of the context); jobs reach them as ``op`` messages.
"""

from typing import Callable, Dict, List, Optional, Sequence

from .abc import AbstractContextServices, AbstractProcess
from .components import (
    CenterSpec,
    ComponentBase,
    ComponentRegistry,
    Flow,
    FluidModel,
    Join,
    Leave,
    LinkKind,
    LinkSpec,
    MassSpec,
    MetadataCatalog,
    Reschedule,
    SharedResource,
    db_read,
    db_write,
    instantiate_links,
    instantiate_regional_center,
    share_recompute,
    submit_transfer,
)
from .events import EventKind, ProcessContext, SimEvent
from .exception import ConfigError, ModelError
from .typings import Json, LpId, Ticks
from .utils import TICKS_PER_SECOND, add_ticks

START = "start"


def seconds(ticks: Ticks) -> float:
    return ticks / TICKS_PER_SECOND


def services_of(ctx: ProcessContext) -> AbstractContextServices:
    if not isinstance(ctx.services, AbstractContextServices):
        raise ModelError(f"LP {ctx.lp_id} runs without context services")
    return ctx.services


######################
# Synthetic patterns #
######################


class PingPongProcess(AbstractProcess):
    """Bounces a counter with its peer. Both ends of a symmetric cycle serve."""

    kind = "ping_pong"

    def __init__(
        self, peer: LpId, delay: Ticks, serve: bool = False, jitter: Ticks = 0
    ) -> None:
        self.peer = peer
        self.delay = delay
        self.serve = serve
        self.jitter = jitter

    def __next_delay(self, ctx: ProcessContext) -> Ticks:
        extra = ctx.rng.randint(0, self.jitter) if self.jitter else 0
        return self.delay + extra

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        data = event.data()
        if data.get("op") == START:
            if self.serve:
                ctx.send_after(self.peer, self.__next_delay(ctx), {"n": 0})
            return

        n = int(data["n"])
        ctx.record("rally", n, lp=ctx.lp_id)
        ctx.send_after(self.peer, self.__next_delay(ctx), {"n": n + 1})


class StarProducer(AbstractProcess):
    kind = "star_producer"

    def __init__(
        self, consumers: Sequence[LpId], gap: Ticks, jitter: Ticks = 0
    ) -> None:
        if not consumers:
            raise ConfigError("star_producer needs at least one consumer")
        self.consumers = list(consumers)
        self.gap = gap
        self.jitter = jitter
        self.produced = 0

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        target = self.consumers[ctx.rng.randrange(len(self.consumers))]
        delay = self.gap + (ctx.rng.randint(0, self.jitter) if self.jitter else 0)
        ctx.send_after(target, delay, {"item": self.produced, "sent": ctx.now})
        ctx.record("produced", self.produced, lp=ctx.lp_id, to=target)
        self.produced += 1
        ctx.wakeup(add_ticks(ctx.now, self.gap))


class StarConsumer(AbstractProcess):
    kind = "star_consumer"

    def __init__(self) -> None:
        self.consumed = 0

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        data = event.data()
        if data.get("op") == START:
            return

        self.consumed += 1
        latency = seconds(ctx.now - int(data["sent"]))
        ctx.record("latency", latency, lp=ctx.lp_id)


class TickerProcess(AbstractProcess):
    """Talks only to itself, so none of its events ever waits on a peer."""

    kind = "ticker"

    def __init__(self, gap: Ticks) -> None:
        if gap <= 0:
            raise ConfigError(f"ticker gap must be positive, got {gap}")
        self.gap = gap
        self.ticks = 0

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        ctx.record("tick", self.ticks, lp=ctx.lp_id)
        self.ticks += 1
        ctx.wakeup(add_ticks(ctx.now, self.gap))


##################
# Grid resources #
##################


class FluidOwner(AbstractProcess):
    """Common part of the processes owning shared resources: turns the
    reschedules of the fluid model into completion and interrupt events and
    publishes component state to subscribers."""

    def __init__(self, subscribers: Optional[Dict[str, List[LpId]]] = None) -> None:
        self.registry = ComponentRegistry()
        self.model = FluidModel()
        self.subscribers = {k: sorted(v) for k, v in (subscribers or {}).items()}
        self.published: Dict[str, int] = {}

    def apply(self, ctx: ProcessContext, reschedules: Sequence[Reschedule]) -> None:
        for r in reschedules:
            if r.old_key is not None:
                ctx.cancel(r.old_key)

            e = ctx.wakeup(r.completion, {"op": "complete", "flow": r.flow_id})
            self.model.flows[r.flow_id].key = e.key
            if r.interrupt:
                ctx.wakeup(ctx.now, {"op": "interrupt", "flow": r.flow_id})

    def join(self, ctx: ProcessContext, flow: Flow) -> None:
        self.apply(ctx, share_recompute(self.model, ctx.now, Join(flow)))

    def leave(self, ctx: ProcessContext, flow_id: str) -> Flow:
        flow = self.model.flows.get(flow_id)
        if flow is None:
            m = f"Completion of unknown job {flow_id}"
            raise ModelError(m, virtual_time=ctx.now)

        self.apply(ctx, share_recompute(self.model, ctx.now, Leave(flow_id)))
        return flow

    def record_job(self, ctx: ProcessContext, flow: Flow) -> None:
        job = str(flow.info.get("job", flow.flow_id))
        ctx.record("job_completion", seconds(ctx.now - flow.started_at), job=job)
        ctx.record("job_demand", float(flow.delivered), job=job)

    def publish(self, ctx: ProcessContext) -> None:
        for cid in sorted(self.subscribers):
            c = self.registry.get(cid)
            if self.published.get(cid, -1) == c.state_version:
                continue

            self.published[cid] = c.state_version
            for lp in self.subscribers[cid]:
                ctx.send_after(lp, ctx.lookahead, c.snapshot(), EventKind.STATE_UPDATE)

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        data = event.data()
        op = data.get("op")
        if op == "complete":
            self.complete(ctx, self.leave(ctx, str(data["flow"])))
        elif op == "interrupt":
            pass
        else:
            self.request(ctx, str(op), data)

        self.publish(ctx)

    def request(self, ctx: ProcessContext, op: str, data: Json) -> None:
        raise NotImplementedError  # pragma: no cover

    def complete(self, ctx: ProcessContext, flow: Flow) -> None:
        raise NotImplementedError  # pragma: no cover

    def finalize(self, ctx: ProcessContext) -> None:
        for rid in sorted(self.model.resources):
            r = self.model.resources[rid]
            ctx.record("interrupts", r.interrupts, component=rid)


class NetworkProcess(FluidOwner):
    """Owns every WAN link of the context. A transfer's completion is delivered
    as an ``arrival`` to its destination process, one lookahead later."""

    kind = "network"

    def __init__(
        self,
        links: Sequence[LinkSpec],
        subscribers: Optional[Dict[str, List[LpId]]] = None,
    ) -> None:
        super().__init__(subscribers)
        for link in instantiate_links(links, self.registry):
            self.model.add_resource(link)

    def request(self, ctx: ProcessContext, op: str, data: Json) -> None:
        if op == START:
            return

        if op != "transfer":
            raise ModelError(f"Network cannot handle '{op}'", virtual_time=ctx.now)

        job = str(data["job"])
        dst = int(data.get("dst_lp", 0))
        flow, reschedules = submit_transfer(
            self.model, data["chain"], int(data["bits"]), ctx.lp_id, dst, ctx.now, job
        )
        flow.info.update(job=job, arrival=data.get("arrival"))
        self.apply(ctx, reschedules)

    def complete(self, ctx: ProcessContext, flow: Flow) -> None:
        self.record_job(ctx, flow)
        arrival = flow.info.get("arrival")
        dst = int(flow.info["dst"])
        if dst and arrival is not None:
            ctx.send_after(dst, ctx.lookahead, {"op": "arrival", **arrival})

    def finalize(self, ctx: ProcessContext) -> None:
        super().finalize(ctx)
        for rid in sorted(self.model.resources):
            bits = self.model.resources[rid].delivered
            ctx.record("link_bits", float(bits), link=rid)


class CenterProcess(FluidOwner):
    """One regional center: a cpu farm, a database server with its mass
    storage, and the LAN used to migrate objects between them."""

    kind = "center"

    def __init__(
        self,
        spec: CenterSpec,
        subscribers: Optional[Dict[str, List[LpId]]] = None,
        initial: Sequence[Json] = (),
    ) -> None:
        super().__init__(subscribers)
        self.spec = spec
        self.center = instantiate_regional_center(spec, self.registry)
        for c in self.center.components:
            if isinstance(c, SharedResource):
                self.model.add_resource(c)

        self.initial = list(initial)
        self.catalog = MetadataCatalog()
        self.migrations = 0

    @property
    def name(self) -> str:
        return self.spec.name

    def request(self, ctx: ProcessContext, op: str, data: Json) -> None:
        if op == START:
            for obj in self.initial:
                self.store(ctx, str(obj["object"]), int(obj["size"]))
        elif op == "process":
            self.process(ctx, str(data["job"]), int(data["demand"]), data.get("cpu"))
        elif op == "store":
            self.store(ctx, str(data["object"]), int(data["size"]))
        elif op == "arrival":
            self.arrival(ctx, data)
        elif op == "analysis":
            self.analysis(ctx, data)
        else:
            m = f"{self.name} cannot handle '{op}'"
            raise ModelError(m, virtual_time=ctx.now)

    def pick_cpu(self, cpu: Optional[str]) -> str:
        if cpu is not None:
            if cpu not in self.model.resources:
                raise ModelError(f"{self.name} has no cpu {cpu}")
            return cpu

        if not self.center.cpus:
            raise ModelError(f"{self.name} has no cpus")

        best = min(self.center.cpus, key=lambda c: (len(c.active), c.component_id))
        return best.component_id

    def process(
        self, ctx: ProcessContext, job: str, demand: int, cpu: Optional[str] = None
    ) -> None:
        if demand <= 0:
            raise ModelError(f"Job {job} has demand {demand}", virtual_time=ctx.now)

        flow = Flow(job, demand, (self.pick_cpu(cpu),), ctx.now)
        flow.info.update(job=job, kind="processing")
        self.join(ctx, flow)

    def store(self, ctx: ProcessContext, object_id: str, size: int) -> None:
        db = self.center.db
        if db is None:
            raise ModelError(f"{self.name} has no database server")

        outcome = db_write(db, object_id, size, ctx.now, self.center.mass)
        if self.catalog.lookup(object_id) is None:
            self.catalog.register(object_id, {"center": self.name, "at": ctx.now})

        for m in outcome.migrations:
            self.migrations += 1
            ctx.record("migration", m.size, object=m.object_id, target=m.target)
            lan = self.center.lan
            if lan is not None:
                flow_id = f"migrate:{m.object_id}:{self.migrations}"
                flow = Flow(flow_id, m.size * 8, (lan.component_id,), ctx.now)
                flow.info.update(job=flow_id, kind="migration")
                self.join(ctx, flow)

    def arrival(self, ctx: ProcessContext, data: Json) -> None:
        dataset = data.get("dataset")
        if dataset is not None:
            self.store(ctx, str(dataset), int(data["size"]))

        then = int(data.get("then_demand", 0))
        if then > 0:
            self.process(ctx, f"{data['job']}.proc", then)

    def analysis(self, ctx: ProcessContext, data: Json) -> None:
        job = str(data["job"])
        dataset = str(data["dataset"])
        _, latency = db_read(self.center.db, dataset, ctx.now, self.center.mass)
        if latency > 0:
            msg = {"op": "process", "job": job, "demand": int(data["demand"])}
            ctx.wakeup(add_ticks(ctx.now, latency), msg)
        else:
            self.process(ctx, job, int(data["demand"]))

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        super().handle(ctx, event)
        db = self.center.db
        if db is not None and db.used > db.capacity:
            m = f"{db.component_id} holds {db.used} > {db.capacity}"
            raise ModelError(m, virtual_time=ctx.now)

    def complete(self, ctx: ProcessContext, flow: Flow) -> None:
        if flow.info.get("kind") == "migration":
            return
        self.record_job(ctx, flow)

    def finalize(self, ctx: ProcessContext) -> None:
        super().finalize(ctx)
        db = self.center.db
        if db is not None:
            for k in sorted(db.stored):
                ctx.record(
                    "db_object",
                    db.stored[k].size,
                    center=self.name,
                    object=k,
                    location=db.component_id,
                )
        for m in self.center.mass:
            for k in sorted(m.stored):
                ctx.record(
                    "db_object",
                    m.stored[k].size,
                    center=self.name,
                    object=k,
                    location=m.component_id,
                )


class ReplicaWatcher(AbstractProcess):
    """Subscribes to component state and records what its replica shows."""

    kind = "replica_watcher"

    def __init__(self, components: Sequence[str] = ()) -> None:
        self.components = list(components)
        self.seen: Dict[str, int] = {}

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        if event.kind != EventKind.STATE_UPDATE:
            return

        cid = str(event.data()["component_id"])
        replica: Optional[ComponentBase] = services_of(ctx).replica(cid)
        if replica is None:
            raise ModelError(f"No replica of {cid} on LP {ctx.lp_id}")

        self.seen[cid] = replica.state_version
        ctx.record("replica_version", replica.state_version, component=cid)


############
# Workload #
############


class WorkloadDriver(AbstractProcess):
    """Submits the scenario's job list: every job is one message, sent at start
    and timestamped with the job's arrival time."""

    kind = "workload"

    def __init__(self, jobs: Sequence[Json]) -> None:
        self.jobs = sorted(jobs, key=lambda j: (int(j["time"]), str(j["id"])))

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        if event.data().get("op") != START:
            return

        for job in self.jobs:
            ctx.record("job_submitted", float(job["demand"]), job=str(job["id"]))
            ctx.send(int(job["to"]), int(job["time"]), job["message"])


class SpawnerProcess(AbstractProcess):
    """Creates jobs at run time; the scheduler picks the agent hosting each."""

    kind = "spawner"

    def __init__(self, jobs: int, gap: Ticks, work: Ticks) -> None:
        self.jobs = jobs
        self.gap = gap
        self.work = work
        self.spawned = 0
        self.submitted: Dict[str, Ticks] = {}

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        data = event.data()
        if data.get("op") == "done":
            job = str(data["job"])
            started = self.submitted.pop(job)
            ctx.record("job_completion", seconds(ctx.now - started), job=job)
            return

        if self.spawned >= self.jobs:
            return

        job = f"{ctx.lp_id}/{self.spawned}"
        self.spawned += 1
        self.submitted[job] = ctx.now
        params = {"work": self.work, "parent": ctx.lp_id}
        services_of(ctx).place_job(ctx, job, DynamicJobProcess.kind, params)
        ctx.wakeup(add_ticks(ctx.now, self.gap), {"op": "spawn"})


class DynamicJobProcess(AbstractProcess):
    """A job created by :class:`SpawnerProcess`. Reusable once idle."""

    kind = "dynamic_job"

    def __init__(self) -> None:
        self.busy = False
        self.served = 0

    def is_idle(self) -> bool:
        return not self.busy

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        data = event.data()
        if event.kind == EventKind.START_NEW_JOB:
            params = data["params"]
            self.busy = True
            self.served += 1
            done = {"op": "done", "job": data["job"], "parent": params["parent"]}
            ctx.wakeup(add_ticks(ctx.now, int(params["work"])), done)
        elif data.get("op") == "done":
            self.busy = False
            reply = {"op": "done", "job": data["job"]}
            ctx.send_after(int(data["parent"]), ctx.lookahead, reply)


#####################
# Process factories #
#####################


def center_spec(doc: Json) -> CenterSpec:
    mass = tuple(
        MassSpec(m.get("capacity"), int(m.get("mount_latency", 0)))
        for m in doc.get("mass", [])
    )
    return CenterSpec(
        str(doc["name"]),
        cpus=int(doc.get("cpus", 1)),
        cpu_power=int(doc.get("cpu_power", 10)),
        lan_bandwidth=doc.get("lan_bandwidth"),
        db_capacity=doc.get("db_capacity"),
        mass=mass,
    )


def link_spec(doc: Json) -> LinkSpec:
    return LinkSpec(
        str(doc["id"]), int(doc["bandwidth"]), LinkKind(doc.get("kind", "WAN"))
    )


ProcessFactory = Callable[[Json], AbstractProcess]

PROCESS_KINDS: Dict[str, ProcessFactory] = {
    PingPongProcess.kind: lambda p: PingPongProcess(
        int(p["peer"]), int(p["delay"]), bool(p.get("serve")), int(p.get("jitter", 0))
    ),
    StarProducer.kind: lambda p: StarProducer(
        [int(c) for c in p["consumers"]], int(p["gap"]), int(p.get("jitter", 0))
    ),
    StarConsumer.kind: lambda p: StarConsumer(),
    TickerProcess.kind: lambda p: TickerProcess(int(p["gap"])),
    NetworkProcess.kind: lambda p: NetworkProcess(
        [link_spec(link) for link in p.get("links", [])], p.get("subscribers")
    ),
    CenterProcess.kind: lambda p: CenterProcess(
        center_spec(p["center"]), p.get("subscribers"), p.get("initial", [])
    ),
    ReplicaWatcher.kind: lambda p: ReplicaWatcher(p.get("components", [])),
    WorkloadDriver.kind: lambda p: WorkloadDriver(p.get("jobs", [])),
    SpawnerProcess.kind: lambda p: SpawnerProcess(
        int(p["jobs"]), int(p["gap"]), int(p["work"])
    ),
    DynamicJobProcess.kind: lambda p: DynamicJobProcess(),
}


def build_process(kind: str, params: Optional[Json] = None) -> AbstractProcess:
    """Instantiate the behavior registered under **kind**.

    :raise grid_dsim.exception.ConfigError: On an unknown kind or bad params.
    """
    try:
        factory = PROCESS_KINDS[kind]
    except KeyError:
        raise ConfigError(f"Unknown process kind '{kind}'")

    try:
        return factory(params or {})
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid parameters for process kind '{kind}': {e}")

