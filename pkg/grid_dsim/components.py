"""Grid resources: shared CPU units and network links under an equal-share fluid
model, database servers with automatic migration to mass storage, and the
assembly of regional centers.

Components are plain state; the logical process owning them (see
:mod:`grid_dsim.models`) turns the reschedules computed here into events.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import (
    ClassVar,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Type,
    Union,
)

from .events import EventKey, SimEvent
from .exception import ConfigError, ModelError, RoutingError, StorageError
from .typings import AgentId, ComponentId, Json, LpId, Ticks
from .utils import TICKS_PER_SECOND


class LinkKind(str, Enum):
    LAN = "LAN"
    WAN = "WAN"


class JobKind(str, Enum):
    PROCESSING = "PROCESSING"
    TRANSFER = "TRANSFER"
    ANALYSIS = "ANALYSIS"


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


#################
# Base classes  #
#################


@dataclass(eq=False)
class ComponentBase:
    """A replicated simulation object. Only the owner mutates it; every
    mutation bumps **state_version**."""

    component_id: ComponentId
    owner_agent: AgentId = 0
    state_version: int = 0

    kind: ClassVar[str] = "component"

    def fields(self) -> Json:
        raise NotImplementedError  # pragma: no cover

    def load_fields(self, fields: Json) -> None:
        raise NotImplementedError  # pragma: no cover

    def touch(self) -> int:
        self.state_version += 1
        return self.state_version

    def snapshot(self) -> Json:
        """Payload of the STATE_UPDATE event announcing the current state."""
        return {
            "component_id": self.component_id,
            "kind": self.kind,
            "state_version": self.state_version,
            "fields": self.fields(),
        }


@dataclass(eq=False)
class SharedResource(ComponentBase):
    """A resource whose capacity is split equally among its active jobs."""

    capacity: int = 1
    active: Set[str] = field(default_factory=set)
    interrupts: int = 0
    delivered: Fraction = Fraction(0)

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ConfigError(f"{self.component_id}: capacity must be positive")

    def share(self) -> Fraction:
        """Current per-job rate in units per tick."""
        n = max(1, len(self.active))
        return Fraction(self.capacity, TICKS_PER_SECOND * n)

    def fields(self) -> Json:
        return {
            "capacity": self.capacity,
            "active": sorted(self.active),
            "interrupts": self.interrupts,
        }

    def load_fields(self, fields: Json) -> None:
        self.capacity = int(fields["capacity"])
        self.active = set(fields["active"])
        self.interrupts = int(fields["interrupts"])


@dataclass(eq=False)
class CpuUnit(SharedResource):
    kind: ClassVar[str] = "cpu"

    @property
    def power(self) -> int:
        return self.capacity


@dataclass(eq=False)
class NetLink(SharedResource):
    link_kind: LinkKind = LinkKind.LAN

    kind: ClassVar[str] = "link"

    @property
    def bandwidth(self) -> int:
        return self.capacity

    def fields(self) -> Json:
        return {**super().fields(), "link_kind": self.link_kind.value}

    def load_fields(self, fields: Json) -> None:
        super().load_fields(fields)
        self.link_kind = LinkKind(fields["link_kind"])


@dataclass
class StoredObject:
    size: int
    last_access: Ticks


def stored_fields(stored: Dict[str, StoredObject]) -> Json:
    return {k: [o.size, o.last_access] for k, o in sorted(stored.items())}


def load_stored(doc: Json) -> Dict[str, StoredObject]:
    return {k: StoredObject(int(v[0]), int(v[1])) for k, v in doc.items()}


@dataclass(eq=False)
class DbServer(ComponentBase):
    capacity: int = 0
    stored: Dict[str, StoredObject] = field(default_factory=dict)
    next_mass: int = 0

    kind: ClassVar[str] = "db"

    @property
    def used(self) -> int:
        return sum(o.size for o in self.stored.values())

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def fields(self) -> Json:
        return {"capacity": self.capacity, "stored": stored_fields(self.stored)}

    def load_fields(self, fields: Json) -> None:
        self.capacity = int(fields["capacity"])
        self.stored = load_stored(fields["stored"])


@dataclass(eq=False)
class MassStorage(ComponentBase):
    # None means unbounded tape capacity
    tape_capacity: Optional[int] = None
    stored: Dict[str, StoredObject] = field(default_factory=dict)
    mount_latency: Ticks = 0

    kind: ClassVar[str] = "mss"

    @property
    def used(self) -> int:
        return sum(o.size for o in self.stored.values())

    def has_room(self, size: int, planned: int = 0) -> bool:
        if self.tape_capacity is None:
            return True
        return self.used + planned + size <= self.tape_capacity

    def fields(self) -> Json:
        return {
            "tape_capacity": self.tape_capacity,
            "mount_latency": self.mount_latency,
            "stored": stored_fields(self.stored),
        }

    def load_fields(self, fields: Json) -> None:
        cap = fields["tape_capacity"]
        self.tape_capacity = None if cap is None else int(cap)
        self.mount_latency = int(fields["mount_latency"])
        self.stored = load_stored(fields["stored"])


COMPONENT_TYPES: Dict[str, Type[ComponentBase]] = {
    c.kind: c for c in (CpuUnit, NetLink, DbServer, MassStorage)
}


@dataclass(frozen=True)
class SimJob:
    job_id: str
    kind: JobKind
    demand: int
    resources: Tuple[ComponentId, ...]
    lp: LpId = 0
    dataset: Optional[str] = None


#####################
# Equal-share model #
#####################


@dataclass
class Flow:
    """Demand of one job over a chain of shared resources."""

    flow_id: str
    demand: int
    resources: Tuple[ComponentId, ...]
    started_at: Ticks
    remaining: Fraction = Fraction(0)
    delivered: Fraction = Fraction(0)
    rate: Fraction = Fraction(0)
    completion: Optional[Ticks] = None
    key: Optional[EventKey] = None
    reschedules: int = 0
    residual: Fraction = Fraction(0)
    info: Json = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.remaining == 0:
            self.remaining = Fraction(self.demand)


@dataclass(frozen=True)
class Join:
    flow: Flow


@dataclass(frozen=True)
class Leave:
    flow_id: str


Change = Union[Join, Leave]


@dataclass(frozen=True)
class Reschedule:
    flow_id: str
    completion: Ticks
    # Completion event superseded by this one, to be cancelled
    old_key: Optional[EventKey]
    interrupt: bool


class FluidModel:
    """Processor-sharing over a set of resources.

    A flow's rate is the smallest equal share along its chain. Rates are
    piecewise constant between changes; at every change the remaining demand
    of every flow is integrated and completion instants are recomputed.
    """

    def __init__(self, resources: Sequence[SharedResource] = ()) -> None:
        self.resources: Dict[ComponentId, SharedResource] = {}
        self.flows: Dict[str, Flow] = {}
        self.last_update: Ticks = 0
        self.interrupts = 0
        for r in resources:
            self.add_resource(r)

    def add_resource(self, r: SharedResource) -> None:
        if r.component_id in self.resources:
            raise ConfigError(f"Duplicate resource id {r.component_id}")
        self.resources[r.component_id] = r

    def rate_of(self, flow: Flow) -> Fraction:
        return min(self.resources[rid].share() for rid in flow.resources)

    def advance(self, now: Ticks) -> None:
        if now < self.last_update:
            m = f"Fluid model moved back in time ({now} < {self.last_update})"
            raise ModelError(m, virtual_time=now)

        elapsed = now - self.last_update
        if elapsed:
            for flow in self.flows.values():
                done = flow.rate * elapsed
                flow.remaining -= done
                flow.delivered += done
                for rid in flow.resources:
                    self.resources[rid].delivered += done

        self.last_update = now

    def recompute(
        self, now: Ticks, changed: Sequence[ComponentId]
    ) -> List[Reschedule]:
        out: List[Reschedule] = []
        for flow_id in sorted(self.flows):
            flow = self.flows[flow_id]
            flow.rate = self.rate_of(flow)
            left = max(flow.remaining, Fraction(0))
            completion = now + round_half_up(left / flow.rate)
            if completion == flow.completion:
                continue

            interrupt = flow.completion is not None
            if interrupt:
                flow.reschedules += 1
                self.interrupts += 1
                hit = [rid for rid in flow.resources if rid in changed]
                self.resources[hit[0] if hit else flow.resources[0]].interrupts += 1

            out.append(Reschedule(flow_id, completion, flow.key, interrupt))
            flow.completion = completion

        return out

    def __iter__(self) -> Iterator[Flow]:
        return iter(self.flows.values())


def share_recompute(model: FluidModel, now: Ticks, change: Change) -> List[Reschedule]:
    """Apply a JOIN or LEAVE at **now** and return every completion that moved.

    :raise grid_dsim.exception.ModelError: On a LEAVE of an unknown job, a JOIN
        of a known one or on unregistered resources.
    """
    model.advance(now)

    if isinstance(change, Join):
        flow = change.flow
        if flow.flow_id in model.flows:
            raise ModelError(f"Job {flow.flow_id} already active", virtual_time=now)

        missing = [rid for rid in flow.resources if rid not in model.resources]
        if missing or not flow.resources:
            m = f"Job {flow.flow_id} references unknown resources {missing}"
            raise ModelError(m, virtual_time=now)

        model.flows[flow.flow_id] = flow
        for rid in flow.resources:
            model.resources[rid].active.add(flow.flow_id)
            model.resources[rid].touch()

        return model.recompute(now, flow.resources)

    if change.flow_id not in model.flows:
        raise ModelError(f"LEAVE of unknown job {change.flow_id}", virtual_time=now)

    flow = model.flows.pop(change.flow_id)
    flow.residual = flow.remaining
    flow.delivered += flow.remaining
    for rid in flow.resources:
        r = model.resources[rid]
        r.delivered += flow.remaining
        r.active.discard(flow.flow_id)
        r.touch()
    flow.remaining = Fraction(0)

    return model.recompute(now, flow.resources)


def submit_transfer(
    model: FluidModel,
    chain: Sequence[ComponentId],
    bits: int,
    src_lp: LpId,
    dst_lp: LpId,
    now: Ticks,
    transfer_id: str,
) -> Tuple[Flow, List[Reschedule]]:
    """Start a transfer over **chain**; its rate is the bottleneck share."""
    if not chain:
        raise ModelError(f"Transfer {transfer_id} has an empty link chain")

    if bits <= 0:
        raise ModelError(f"Transfer {transfer_id} of {bits} bits")

    for rid in chain:
        if not isinstance(model.resources.get(rid), NetLink):
            m = f"Transfer {transfer_id}: {rid} is not a registered link"
            raise ModelError(m, virtual_time=now)

    flow = Flow(
        transfer_id,
        bits,
        tuple(chain),
        now,
        info={"src": src_lp, "dst": dst_lp},
    )
    return flow, share_recompute(model, now, Join(flow))


###########
# Storage #
###########


@dataclass(frozen=True)
class Migration:
    object_id: str
    size: int
    source: ComponentId
    target: ComponentId
    started_at: Ticks


@dataclass
class WriteOutcome:
    object_id: str
    size: int
    migrations: List[Migration] = field(default_factory=list)


def db_write(
    db: DbServer,
    object_id: str,
    size: int,
    now: Ticks,
    mass: Sequence[MassStorage] = (),
) -> WriteOutcome:
    """Store an object, moving least-recently-accessed objects to mass storage
    until it fits. Migrations cascade round-robin over **mass**, starting at the
    server that took the previous one.

    :raise grid_dsim.exception.StorageError: If the object is larger than the
        server, or if it does not fit and no mass storage can take the overflow.
        The state is left untouched in that case.
    """
    if size <= 0:
        raise StorageError(f"Invalid object size {size} for {object_id}")

    if size > db.capacity:
        m = f"Object {object_id} ({size}) exceeds {db.component_id} ({db.capacity})"
        raise StorageError(m, virtual_time=now)

    previous = db.stored.get(object_id)
    free = db.free + (previous.size if previous else 0)

    victims: List[str] = []
    lru = sorted(
        (o.last_access, k) for k, o in db.stored.items() if k != object_id
    )
    for _, k in lru:
        if free >= size:
            break
        victims.append(k)
        free += db.stored[k].size

    planned = [0] * len(mass)
    targets: List[int] = []
    cursor = db.next_mass
    for k in victims:
        if not mass:
            m = f"{db.component_id} is full and has no mass storage for {k}"
            raise StorageError(m, virtual_time=now)

        for step in range(len(mass)):
            i = (cursor + step) % len(mass)
            if mass[i].has_room(db.stored[k].size, planned[i]):
                break
        else:
            m = f"No mass storage has room for {k} ({db.stored[k].size})"
            raise StorageError(m, virtual_time=now)

        planned[i] += db.stored[k].size
        targets.append(i)
        cursor = i

    outcome = WriteOutcome(object_id, size)
    for k, i in zip(victims, targets):
        obj = db.stored.pop(k)
        mass[i].stored[k] = obj
        mass[i].touch()
        migration = Migration(k, obj.size, db.component_id, mass[i].component_id, now)
        outcome.migrations.append(migration)

    db.next_mass = cursor
    db.stored[object_id] = StoredObject(size, now)
    db.touch()
    return outcome


def db_read(
    db: Optional[DbServer],
    object_id: str,
    now: Ticks,
    mass: Sequence[MassStorage] = (),
) -> Tuple[ComponentId, Ticks]:
    """Locate a dataset: free from the database, after the mount latency from
    mass storage.

    :return: The component holding the object, and the access latency.
    """
    if db is not None and object_id in db.stored:
        db.stored[object_id].last_access = now
        db.touch()
        return db.component_id, 0

    for m in mass:
        if object_id in m.stored:
            m.stored[object_id].last_access = now
            return m.component_id, m.mount_latency

    raise StorageError(f"Unknown dataset {object_id}", virtual_time=now)


################
# Replication  #
################


def apply_state_update(
    replica: ComponentBase, update: Union[Json, SimEvent]
) -> ComponentBase:
    """Adopt the owner's state if the update is newer than the replica.

    :raise grid_dsim.exception.RoutingError: If the update is for another
        component.
    """
    doc = update.data() if isinstance(update, SimEvent) else update
    if doc.get("component_id") != replica.component_id:
        m = f"Update for {doc.get('component_id')} delivered to {replica.component_id}"
        raise RoutingError(m)

    version = int(doc["state_version"])
    if version > replica.state_version:
        replica.load_fields(doc["fields"])
        replica.state_version = version

    return replica


def replica_from_update(doc: Json) -> ComponentBase:
    try:
        cls = COMPONENT_TYPES[doc["kind"]]
    except KeyError:
        raise RoutingError(f"Unknown component kind in update: {doc.get('kind')}")

    # A fresh replica takes the owner's state whatever its version
    replica = cls(str(doc["component_id"]))
    replica.load_fields(doc["fields"])
    replica.state_version = int(doc["state_version"])
    return replica


class ReplicaTable:
    """Replicas of remote components seen by the logical processes of one
    agent, kept current by STATE_UPDATE events."""

    def __init__(self) -> None:
        self.replicas: Dict[ComponentId, ComponentBase] = {}

    def apply(self, doc: Json) -> ComponentBase:
        cid = doc["component_id"]
        if cid not in self.replicas:
            self.replicas[cid] = replica_from_update(doc)
            return self.replicas[cid]

        return apply_state_update(self.replicas[cid], doc)

    def get(self, cid: ComponentId) -> Optional[ComponentBase]:
        return self.replicas.get(cid)

    def __contains__(self, cid: object) -> bool:
        return cid in self.replicas


#######################
# Lookup-only stubs   #
#######################


class LookupDirectory:
    label = "entry"

    def __init__(self) -> None:
        self.entries: Dict[str, Json] = {}

    def register(self, key: str, entry: Json) -> None:
        if key in self.entries:
            raise ConfigError(f"Duplicate {self.label} {key}")
        self.entries[key] = entry

    def lookup(self, key: str) -> Optional[Json]:
        return self.entries.get(key)


class MetadataCatalog(LookupDirectory):
    """Dataset id -> where it was first stored."""

    label = "dataset"


class JobSchedulerDirectory(LookupDirectory):
    """Job id -> agent and LP the job was placed on."""

    label = "job"


#####################
# Regional centers  #
#####################


class ComponentRegistry:
    """Components registered in one context, by id."""

    def __init__(self) -> None:
        self.components: Dict[ComponentId, ComponentBase] = {}

    def register(self, c: ComponentBase) -> ComponentBase:
        if c.component_id in self.components:
            raise ConfigError(f"Duplicate component id {c.component_id}")
        self.components[c.component_id] = c
        return c

    def get(self, cid: ComponentId) -> ComponentBase:
        try:
            return self.components[cid]
        except KeyError:
            raise ModelError(f"Component {cid} is not registered in this context")

    def __contains__(self, cid: object) -> bool:
        return cid in self.components

    def __len__(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class MassSpec:
    capacity: Optional[int] = None
    mount_latency: Ticks = 0


@dataclass(frozen=True)
class CenterSpec:
    name: str
    cpus: int = 1
    cpu_power: int = 10
    lan_bandwidth: Optional[int] = None
    db_capacity: Optional[int] = None
    mass: Tuple[MassSpec, ...] = ()


@dataclass(frozen=True)
class LinkSpec:
    link_id: ComponentId
    bandwidth: int
    kind: LinkKind = LinkKind.WAN


@dataclass
class RegionalCenter:
    spec: CenterSpec
    cpus: List[CpuUnit]
    lan: Optional[NetLink]
    db: Optional[DbServer]
    mass: List[MassStorage]

    @property
    def components(self) -> List[ComponentBase]:
        out: List[ComponentBase] = list(self.cpus)
        out += [c for c in (self.lan, self.db) if c is not None]
        return out + list(self.mass)

    @property
    def component_ids(self) -> List[ComponentId]:
        return [c.component_id for c in self.components]


def instantiate_regional_center(
    spec: CenterSpec, registry: ComponentRegistry, owner_agent: AgentId = 0
) -> RegionalCenter:
    """Create and register the components of one regional center.

    Ids are ``<name>.cpu<i>``, ``<name>.lan``, ``<name>.db`` and
    ``<name>.mss<i>``.

    :raise grid_dsim.exception.ConfigError: On duplicate component ids.
    """
    if spec.cpus < 0:
        raise ConfigError(f"Center {spec.name}: negative cpu count")

    n = spec.name
    cpus = [
        CpuUnit(f"{n}.cpu{i}", owner_agent, capacity=spec.cpu_power)
        for i in range(spec.cpus)
    ]
    lan = None
    if spec.lan_bandwidth is not None:
        lan = NetLink(f"{n}.lan", owner_agent, capacity=spec.lan_bandwidth)

    db = None
    if spec.db_capacity is not None:
        db = DbServer(f"{n}.db", owner_agent, capacity=spec.db_capacity)

    mass = [
        MassStorage(
            f"{n}.mss{i}",
            owner_agent,
            tape_capacity=m.capacity,
            mount_latency=m.mount_latency,
        )
        for i, m in enumerate(spec.mass)
    ]

    center = RegionalCenter(spec, cpus, lan, db, mass)
    for c in center.components:
        registry.register(c)

    return center


def instantiate_links(
    specs: Sequence[LinkSpec], registry: ComponentRegistry, owner_agent: AgentId = 0
) -> List[NetLink]:
    links = []
    for s in specs:
        link = NetLink(s.link_id, owner_agent, capacity=s.bandwidth, link_kind=s.kind)
        registry.register(link)
        links.append(link)

    return links


def t0_t1_topology(
    n_t1: int = 2,
    wan_bandwidth: int = 1_000_000_000,
    cpus: int = 4,
    cpu_power: int = 100,
    lan_bandwidth: int = 10_000_000_000,
    db_capacity: int = 10**12,
) -> Tuple[List[CenterSpec], List[LinkSpec]]:
    """One T0 center wired to **n_t1** T1 centers, one WAN link each."""
    if n_t1 < 1:
        raise ConfigError(f"Need at least one T1 center, got {n_t1}")

    def center(name: str) -> CenterSpec:
        return CenterSpec(
            name,
            cpus=cpus,
            cpu_power=cpu_power,
            lan_bandwidth=lan_bandwidth,
            db_capacity=db_capacity,
            mass=(MassSpec(),),
        )

    names = [f"T1{chr(ord('a') + i)}" if i < 26 else f"T1_{i}" for i in range(n_t1)]
    centers = [center("T0")] + [center(n) for n in names]
    links = [LinkSpec(f"wan.T0-{n}", wan_bandwidth, LinkKind.WAN) for n in names]
    return centers, links

