import random
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import pytest

from grid_dsim.components import (
    CenterSpec,
    ComponentRegistry,
    CpuUnit,
    DbServer,
    Flow,
    FluidModel,
    JobSchedulerDirectory,
    Join,
    Leave,
    LinkKind,
    LinkSpec,
    MassSpec,
    MassStorage,
    MetadataCatalog,
    NetLink,
    ReplicaTable,
    apply_state_update,
    db_read,
    db_write,
    instantiate_links,
    instantiate_regional_center,
    replica_from_update,
    share_recompute,
    submit_transfer,
    t0_t1_topology,
)
from grid_dsim.exception import ConfigError, ModelError, RoutingError, StorageError

from .oracles import fluid_completions

MBPS = 1_000_000


##############
# Fluid model #
##############


def run_fluid(
    jobs: Sequence[Tuple[str, int, int]], capacity: int
) -> Tuple[Dict[str, int], Dict[str, Flow], FluidModel]:
    """Drive the model the way a resource owner does: a JOIN per arrival and a
    LEAVE at every completion, completions first on equal ticks."""
    model = FluidModel([CpuUnit("cpu", capacity=capacity)])
    arrivals = sorted(jobs, key=lambda j: (j[1], j[0]))
    flows: Dict[str, Flow] = {}
    done: Dict[str, int] = {}
    i = 0

    while i < len(arrivals) or model.flows:
        pending = [(f.completion, f.flow_id) for f in model.flows.values()]
        nxt = min(pending) if pending else None
        if nxt is not None and (i == len(arrivals) or nxt[0] <= arrivals[i][1]):
            t, flow_id = nxt
            share_recompute(model, t, Leave(flow_id))  # type: ignore[arg-type]
            done[flow_id] = t  # type: ignore[assignment]
        else:
            flow_id, t, demand = arrivals[i]
            i += 1
            flows[flow_id] = Flow(flow_id, demand, ("cpu",), t)
            share_recompute(model, t, Join(flows[flow_id]))

    return done, flows, model


def test_two_jobs_share_one_cpu() -> None:
    model = FluidModel([CpuUnit("cpu", capacity=MBPS)])
    a = Flow("a", 100, ("cpu",), 0)
    b = Flow("b", 100, ("cpu",), 50)

    out = share_recompute(model, 0, Join(a))
    assert [(r.flow_id, r.completion, r.interrupt) for r in out] == [("a", 100, False)]

    out = share_recompute(model, 50, Join(b))
    assert [(r.flow_id, r.completion, r.interrupt) for r in out] == [
        ("a", 150, True),
        ("b", 250, False),
    ]

    out = share_recompute(model, 150, Leave("a"))
    assert [(r.flow_id, r.completion, r.interrupt) for r in out] == [("b", 200, True)]

    share_recompute(model, 200, Leave("b"))
    cpu = model.resources["cpu"]
    assert model.interrupts == cpu.interrupts == 2
    assert a.delivered == b.delivered == 100
    assert cpu.delivered == 200
    assert not cpu.active
    assert cpu.state_version == 4


def test_fluid_matches_oracle() -> None:
    rng = random.Random(3)
    for _ in range(200):
        capacity = rng.choice([MBPS, 5 * MBPS // 2, 3 * MBPS // 10])
        jobs = [
            (f"j{k}", rng.randint(0, 2_000), rng.randint(1, 3_000))
            for k in range(rng.randint(1, 8))
        ]

        done, flows, model = run_fluid(jobs, capacity)
        expected = fluid_completions(jobs, capacity)

        assert set(done) == set(expected)
        for job_id, t in expected.items():
            assert abs(done[job_id] - t) <= 1 + flows[job_id].reschedules

        # Work is conserved, every job delivered exactly its demand
        total = sum(demand for _, _, demand in jobs)
        assert all(f.delivered == f.demand for f in flows.values())
        assert model.resources["cpu"].delivered == total
        assert model.interrupts == sum(f.reschedules for f in flows.values())


def test_fluid_errors() -> None:
    model = FluidModel([CpuUnit("cpu", capacity=MBPS)])
    share_recompute(model, 10, Join(Flow("a", 10, ("cpu",), 10)))

    with pytest.raises(ModelError):
        share_recompute(model, 10, Join(Flow("a", 10, ("cpu",), 10)))
    with pytest.raises(ModelError):
        share_recompute(model, 10, Leave("zzz"))
    with pytest.raises(ModelError):
        share_recompute(model, 10, Join(Flow("b", 10, ("nowhere",), 10)))
    with pytest.raises(ModelError):
        share_recompute(model, 5, Leave("a"))
    with pytest.raises(ConfigError):
        model.add_resource(CpuUnit("cpu", capacity=1))


def test_transfer_bottleneck() -> None:
    fast = NetLink("fast", capacity=2 * MBPS)
    slow = NetLink("slow", capacity=MBPS)
    model = FluidModel([fast, slow, CpuUnit("cpu", capacity=MBPS)])

    flow, out = submit_transfer(model, ["fast", "slow"], 1_000, 1, 2, 0, "t1")
    assert flow.rate == Fraction(1)
    assert flow.info == {"src": 1, "dst": 2}
    assert [(r.flow_id, r.completion) for r in out] == [("t1", 1_000)]
    assert fast.active == slow.active == {"t1"}


@pytest.mark.parametrize(
    "chain, bits",
    [([], 100), (["fast"], 0), (["fast", "cpu"], 100), (["missing"], 100)],
)
def test_transfer_errors(chain: List[str], bits: int) -> None:
    model = FluidModel([NetLink("fast", capacity=MBPS), CpuUnit("cpu", capacity=MBPS)])
    with pytest.raises(ModelError):
        submit_transfer(model, chain, bits, 1, 2, 0, "t")


def test_resource_capacity() -> None:
    with pytest.raises(ConfigError):
        CpuUnit("cpu", capacity=0)


###########
# Storage #
###########


def test_lru_migration() -> None:
    db = DbServer("db", capacity=100)
    mss = MassStorage("mss")
    db_write(db, "O1", 60, 5, [mss])
    db_write(db, "O2", 30, 9, [mss])

    outcome = db_write(db, "O3", 40, 10, [mss])
    assert [(m.object_id, m.source, m.target) for m in outcome.migrations] == [
        ("O1", "db", "mss")
    ]
    assert set(db.stored) == {"O2", "O3"}
    assert set(mss.stored) == {"O1"}
    assert db.used == 70


def test_read_refreshes_lru() -> None:
    db = DbServer("db", capacity=100)
    mss = MassStorage("mss", mount_latency=500)
    db_write(db, "O1", 60, 5, [mss])
    db_write(db, "O2", 30, 9, [mss])
    assert db_read(db, "O1", 10, [mss]) == ("db", 0)

    # O2 is now the least recently accessed
    db_write(db, "O3", 40, 11, [mss])
    assert set(mss.stored) == {"O2"}
    assert db_read(db, "O2", 12, [mss]) == ("mss", 500)
    assert mss.stored["O2"].last_access == 12

    with pytest.raises(StorageError):
        db_read(db, "O9", 13, [mss])


def test_migration_cascades_over_mass() -> None:
    db = DbServer("db", capacity=100)
    mass = [MassStorage("m0", tape_capacity=50), MassStorage("m1")]
    for t, name in enumerate(["O1", "O2", "O3", "O4"]):
        db_write(db, name, 50, t, mass)

    assert set(mass[0].stored) == {"O1"}
    assert set(mass[1].stored) == {"O2"}
    assert set(db.stored) == {"O3", "O4"}


@pytest.mark.parametrize(
    "size, mass",
    [
        (101, [MassStorage("m0")]),
        (80, []),
        (80, [MassStorage("m0", tape_capacity=10)]),
        (0, [MassStorage("m0")]),
    ],
)
def test_write_rejected(size: int, mass: List[MassStorage]) -> None:
    db = DbServer("db", capacity=100)
    db_write(db, "O1", 60, 1, mass)
    version = db.state_version

    with pytest.raises(StorageError):
        db_write(db, "O2", size, 2, mass)
    assert set(db.stored) == {"O1"}
    assert db.state_version == version
    assert all(not m.stored for m in mass)


def test_storage_invariants() -> None:
    rng = random.Random(8)
    db = DbServer("db", capacity=1_000)
    mass = [MassStorage("m0", tape_capacity=200_000), MassStorage("m1")]
    sizes: Dict[str, int] = {}
    names: List[str] = []

    for now in range(10_000):
        if names and rng.random() < 0.3:
            where, _ = db_read(db, rng.choice(names), now, mass)
            assert where in ("db", "m0", "m1")
        else:
            name = f"o{now}"
            sizes[name] = rng.randint(1, 300)
            names.append(name)
            outcome = db_write(db, name, sizes[name], now, mass)

            kept = [o.last_access for k, o in db.stored.items() if k != name]
            for m in outcome.migrations:
                moved = next(x for x in mass if x.component_id == m.target)
                assert all(moved.stored[m.object_id].last_access <= t for t in kept)

        assert db.used <= db.capacity
        assert mass[0].used <= 200_000

    places: Dict[str, int] = {}
    for holder in [db] + mass:
        for k, o in holder.stored.items():  # type: ignore[attr-defined]
            places[k] = places.get(k, 0) + 1
            assert o.size == sizes[k]
    assert places == {k: 1 for k in sizes}


###############
# Replication #
###############


def test_state_update_versions() -> None:
    owner = CpuUnit("T0.cpu0", owner_agent=1, capacity=10)
    replica = replica_from_update(owner.snapshot())
    assert isinstance(replica, CpuUnit)
    assert replica.capacity == 10

    model = FluidModel([owner])
    share_recompute(model, 0, Join(Flow("j", 5, ("T0.cpu0",), 0)))
    newer = owner.snapshot()
    apply_state_update(replica, newer)
    assert replica.active == {"j"}
    assert replica.state_version == owner.state_version

    stale = {**newer, "state_version": 0, "fields": {**newer["fields"], "active": []}}
    apply_state_update(replica, stale)
    assert replica.active == {"j"}

    with pytest.raises(RoutingError):
        apply_state_update(replica, {**newer, "component_id": "T0.cpu1"})


def test_replica_table() -> None:
    link = NetLink("wan", owner_agent=2, capacity=MBPS, link_kind=LinkKind.WAN)
    table = ReplicaTable()

    first = table.apply(link.snapshot())
    assert "wan" in table
    assert isinstance(first, NetLink) and first.link_kind == LinkKind.WAN

    link.capacity = 2 * MBPS
    link.touch()
    assert table.apply(link.snapshot()) is first
    assert first.bandwidth == 2 * MBPS
    assert table.get("nothing") is None

    with pytest.raises(RoutingError):
        table.apply({"component_id": "x", "kind": "teleporter", "state_version": 1})


def test_db_replica_round_trip() -> None:
    db = DbServer("T1a.db", owner_agent=2, capacity=100)
    db_write(db, "ds", 10, 3)
    replica = replica_from_update(db.snapshot())
    assert isinstance(replica, DbServer)
    assert replica.stored["ds"].size == 10
    assert replica.free == 90


###############
# Directories #
###############


@pytest.mark.parametrize("cls", [MetadataCatalog, JobSchedulerDirectory])
def test_lookup_directory(cls: type) -> None:
    d = cls()
    d.register("x", {"agent": 1})
    assert d.lookup("x") == {"agent": 1}
    assert d.lookup("y") is None
    with pytest.raises(ConfigError):
        d.register("x", {"agent": 2})


####################
# Regional centers #
####################


def test_instantiate_regional_center() -> None:
    registry = ComponentRegistry()
    spec = CenterSpec(
        "T0",
        cpus=2,
        cpu_power=50,
        lan_bandwidth=MBPS,
        db_capacity=100,
        mass=(MassSpec(), MassSpec(capacity=10, mount_latency=3)),
    )
    center = instantiate_regional_center(spec, registry, owner_agent=4)

    assert center.component_ids == [
        "T0.cpu0",
        "T0.cpu1",
        "T0.lan",
        "T0.db",
        "T0.mss0",
        "T0.mss1",
    ]
    assert len(registry) == 6
    assert all(c.owner_agent == 4 for c in center.components)
    assert center.mass[1].tape_capacity == 10
    assert registry.get("T0.cpu1").power == 50  # type: ignore[attr-defined]

    with pytest.raises(ConfigError):
        instantiate_regional_center(spec, registry)
    with pytest.raises(ModelError):
        registry.get("T9.cpu0")


def test_bare_center() -> None:
    center = instantiate_regional_center(CenterSpec("edge"), ComponentRegistry())
    assert center.component_ids == ["edge.cpu0"]
    assert center.lan is None and center.db is None


def test_t0_t1_topology() -> None:
    centers, links = t0_t1_topology(n_t1=2, wan_bandwidth=7)
    assert [c.name for c in centers] == ["T0", "T1a", "T1b"]
    assert [(s.link_id, s.bandwidth) for s in links] == [
        ("wan.T0-T1a", 7),
        ("wan.T0-T1b", 7),
    ]

    registry = ComponentRegistry()
    made = instantiate_links(links + [LinkSpec("lan.x", 1, LinkKind.LAN)], registry)
    assert [link.link_kind for link in made] == [LinkKind.WAN] * 2 + [LinkKind.LAN]

    with pytest.raises(ConfigError):
        t0_t1_topology(n_t1=0)
