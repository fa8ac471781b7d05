"""Independent reference implementations the tests compare against."""

import itertools
import math
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from grid_dsim.abc import AbstractContextServices
from grid_dsim.components import ComponentBase, ReplicaTable
from grid_dsim.events import (
    FRAMEWORK_SOURCE,
    EventKey,
    EventKind,
    EventQueue,
    LogicalProcess,
    ProcessContext,
    SimEvent,
    encode_payload,
)
from grid_dsim.models import build_process
from grid_dsim.scenario import ScenarioConfig
from grid_dsim.typings import Json, LpId
from grid_dsim.utils import TICKS_PER_SECOND, add_ticks, fingerprint

TraceEntry = Tuple[int, int, int, int]
Row = Tuple[str, int, float, Tuple[Tuple[str, str], ...]]


#######################
# Sequential executor #
#######################


class SequentialServices(AbstractContextServices):
    def __init__(self, replicas: ReplicaTable) -> None:
        self.replicas = replicas

    def replica(self, component_id: str) -> Optional[ComponentBase]:
        return self.replicas.get(component_id)

    def place_job(
        self, ctx: ProcessContext, job_id: str, kind: str, params: Json
    ) -> LpId:
        lp_id = fingerprint(f"{ctx.lp_id}/{job_id}") or 1
        payload = {"process": kind, "params": params, "job": job_id}
        ctx.send(
            lp_id, add_ticks(ctx.now, ctx.lookahead), payload, EventKind.START_NEW_JOB
        )
        return lp_id


def sequential_run(config: ScenarioConfig) -> Tuple[List[TraceEntry], List[Row]]:
    """Run **config** on one global event queue, with no synchronization at
    all, and return the processed-event trace, in processing order, and the
    sorted result rows."""
    replicas = ReplicaTable()
    services = SequentialServices(replicas)
    lps: Dict[LpId, LogicalProcess] = {}
    finished: Set[LpId] = set()
    counts: Dict[LpId, int] = {}

    def add(lp_id: LpId, kind: str, params: Optional[Json]) -> LogicalProcess:
        lp = LogicalProcess(lp_id, build_process(kind, params))
        lp.seed(config.seed)
        lps[lp_id] = lp
        counts[lp_id] = 0
        return lp

    for spec in config.processes:
        add(spec.lp_id, spec.kind, spec.params)

    q = EventQueue()
    for lp_id in sorted(lps):
        key = EventKey(0, FRAMEWORK_SOURCE, lp_id)
        start = encode_payload({"op": "start"})
        q.push(SimEvent(key, 0, FRAMEWORK_SOURCE, lp_id, payload=start))

    trace: List[TraceEntry] = []
    rows: List[Row] = []

    def collect(ctx: ProcessContext) -> None:
        for metric, value, tags in ctx.records:
            rows.append((metric, ctx.now, value, tuple(sorted(tags.items()))))

    while q:
        e = q.pop()
        if e.timestamp >= config.horizon:
            break

        if e.kind == EventKind.STATE_UPDATE:
            replicas.apply(e.data())

        lp = lps.get(e.dst_lp)
        if lp is None:
            data = e.data()
            lp = add(e.dst_lp, str(data["process"]), data.get("params"))

        if lp.id in finished:
            continue

        trace.append((e.key.timestamp, e.key.source, e.key.sequence, e.dst_lp))
        lp.deliver(e.key)
        ctx = ProcessContext(lp, 0, e.timestamp, config.lookahead, services)
        lp.behavior.handle(ctx, e)
        counts[lp.id] += 1
        if ctx.finished:
            finished.add(lp.id)
        collect(ctx)

        emitted = list(ctx.emitted)
        for key in ctx.cancelled:
            pending = [x for x in emitted if x.key == key]
            if pending:
                emitted.remove(pending[0])
            else:
                q.cancel(key)

        for x in emitted:
            if x.timestamp < config.horizon:
                q.push(x)

    for lp_id in sorted(lps):
        lp = lps[lp_id]
        ctx = ProcessContext(lp, 0, config.horizon, 0, services)
        lp.behavior.finalize(ctx)
        ctx.record("events_processed", counts[lp_id], lp=lp_id)
        collect(ctx)

    return trace, sorted(rows)


def per_lp(trace: Iterable[Sequence[int]]) -> Dict[LpId, List[TraceEntry]]:
    """Split a trace into the events each LP processed, in processing order.
    Agents run concurrently, so only these per-LP sequences are comparable
    between runs."""
    lps: Dict[LpId, List[TraceEntry]] = {}
    for ts, source, seq, lp in trace:
        lps.setdefault(lp, []).append((ts, source, seq, lp))
    return lps


#############
# Placement #
#############


def brute_force_dist(values: Dict[int, float]) -> Dict[Tuple[int, int], float]:
    """Shortest distances by enumerating every simple path."""
    agents = sorted(values)
    dist: Dict[Tuple[int, int], float] = {}
    for a in agents:
        for b in agents:
            if a == b:
                dist[(a, b)] = 0.0
                continue

            others = [v for v in agents if v not in (a, b)]
            best = math.inf
            for k in range(len(others) + 1):
                for middle in itertools.permutations(others, k):
                    path = (a, *middle, b)
                    w = sum(
                        (values[x] + values[y]) / 2 for x, y in zip(path, path[1:])
                    )
                    best = min(best, w)
            dist[(a, b)] = best

    return dist


def brute_force_select(values: Dict[int, float], participating: Set[int]) -> int:
    dist = brute_force_dist(values)
    scores = {}
    for v in sorted(values):
        others = [dist[(v, u)] for u in sorted(participating) if u != v]
        scores[v] = sum(others) / len(others) if others else values[v]

    best = min(scores.values())
    return min(v for v, s in scores.items() if s == best)


#########
# Fluid #
#########


def fluid_completions(
    jobs: Sequence[Tuple[str, int, int]], capacity: int
) -> Dict[str, int]:
    """Completion tick of every (id, arrival, demand) job on one resource
    shared equally, integrating the piecewise-constant rates exactly.

    Completions are rounded half up to the tick; a completion and an arrival
    at the same tick are applied completion first.
    """
    arrivals = sorted(jobs, key=lambda j: (j[1], j[0]))
    remaining: Dict[str, Fraction] = {}
    done: Dict[str, int] = {}
    now = 0
    i = 0

    while i < len(arrivals) or remaining:
        finish: Optional[Tuple[int, str]] = None
        if remaining:
            rate = Fraction(capacity, TICKS_PER_SECOND * len(remaining))
            finish = min(
                (now + math.floor(max(left, 0) / rate + Fraction(1, 2)), j)
                for j, left in remaining.items()
            )

        if finish is not None and (i == len(arrivals) or finish[0] <= arrivals[i][1]):
            t, job = finish
            rate = Fraction(capacity, TICKS_PER_SECOND * len(remaining))
            for j in remaining:
                remaining[j] -= rate * (t - now)
            del remaining[job]
            done[job] = t
            now = t
        else:
            job, t, demand = arrivals[i]
            i += 1
            if remaining:
                rate = Fraction(capacity, TICKS_PER_SECOND * len(remaining))
                for j in remaining:
                    remaining[j] -= rate * (t - now)
            remaining[job] = Fraction(demand)
            now = t

    return done
