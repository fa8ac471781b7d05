"""Job placement: performance values, the complete agent graph and selection.

Each agent publishes one performance value (lower means more spare capacity).
The graph over agents is complete, an edge weighing the mean of its two
endpoints. All-pairs shortest paths are taken over those weights, and a vertex
is scored by the mean of its distances to the agents already taking part in
the run.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx

from .exception import ConfigError, PlacementError
from .typings import AgentId

Weights = Tuple[float, float, float, float]

DEFAULT_WEIGHTS: Weights = (0.25, 0.25, 0.25, 0.25)
DEFAULT_STALE_TTL = 30.0


def clamp(x: float, low: float = 0.0, high: float = 1.0) -> float:
    return max(low, min(high, float(x)))


@dataclass(frozen=True)
class PerfSample:
    """One reading of an agent's host, network and simulation load.

    Normalized fields are clamped to [0, 1] on construction; **lp_count** may
    exceed **lp_capacity** (the ratio is clamped instead).
    """

    cpu_load_norm: float = 0.0
    mem_used_frac: float = 0.0
    net_load_norm: float = 0.0
    lp_count: int = 0
    lp_capacity: int = 1
    components_cached: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.lp_capacity < 1:
            raise ConfigError(f"Invalid lp_capacity: {self.lp_capacity}")

        if self.lp_count < 0:
            raise ConfigError(f"Invalid lp_count: {self.lp_count}")

        for name in ("cpu_load_norm", "mem_used_frac", "net_load_norm"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ConfigError(f"{name} is not finite: {value}")
            object.__setattr__(self, name, clamp(value))

    @property
    def lp_ratio(self) -> float:
        return min(1.0, self.lp_count / self.lp_capacity)

    def with_lp_count(self, lp_count: int) -> "PerfSample":
        return replace(self, lp_count=lp_count)


@dataclass(frozen=True)
class PerfValue:
    agent: AgentId
    value: float
    sampled_at: float = 0.0
    stale: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.value) or self.value < 0:
            raise PlacementError(f"Invalid performance value {self.value}")

    def is_fresh(self, now: float, ttl: float = DEFAULT_STALE_TTL) -> bool:
        return now - self.sampled_at <= ttl


def check_weights(weights: Sequence[float]) -> Weights:
    if len(weights) != 4:
        raise ConfigError(f"Expected 4 performance weights, got {len(weights)}")

    if any(not math.isfinite(w) or w < 0 for w in weights):
        raise ConfigError(f"Performance weights must be nonnegative: {weights}")

    if not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise ConfigError(f"Performance weights must sum to 1: {weights}")

    w1, w2, w3, w4 = (float(w) for w in weights)
    return (w1, w2, w3, w4)


def performance_value(
    s: PerfSample,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    agent: AgentId = 0,
    sampled_at: Optional[float] = None,
) -> PerfValue:
    """Weighted sum of cpu load, memory use, LP occupancy and network load.

    :param s: The metrics sample.
    :type s: grid_dsim.placement.PerfSample
    :param weights: Four nonnegative weights summing to 1.
    :type weights: Sequence[float]
    :param agent: The agent the sample belongs to.
    :type agent: int
    :param sampled_at: Wall-clock time of the sample (defaults to now).
    :type sampled_at: float | None
    :return: A value in [0, 1]; lower is better.
    :rtype: grid_dsim.placement.PerfValue
    :raise grid_dsim.exception.ConfigError: On invalid weights.
    """
    w1, w2, w3, w4 = check_weights(weights)
    value = (
        w1 * s.cpu_load_norm
        + w2 * s.mem_used_frac
        + w3 * s.lp_ratio
        + w4 * s.net_load_norm
    )
    at = time.time() if sampled_at is None else sampled_at
    return PerfValue(agent, clamp(value), at)


@dataclass
class PlacementGraph:
    values: Dict[AgentId, float]
    graph: nx.Graph
    dist: Dict[AgentId, Dict[AgentId, float]]

    @property
    def vertices(self) -> List[AgentId]:
        return sorted(self.values)

    def weight(self, a: AgentId, b: AgentId) -> float:
        w: float = self.graph[a][b]["weight"]
        return w

    def __len__(self) -> int:
        return len(self.values)


def fresh_values(
    values: Sequence[PerfValue],
    now: Optional[float] = None,
    ttl: Optional[float] = None,
) -> List[PerfValue]:
    """Latest value per agent, dropping those older than **ttl** seconds."""
    latest: Dict[AgentId, PerfValue] = {}
    now = time.time() if now is None else now
    for v in values:
        if ttl is not None and not v.is_fresh(now, ttl):
            continue
        if v.agent not in latest or v.sampled_at >= latest[v.agent].sampled_at:
            latest[v.agent] = v

    return [latest[a] for a in sorted(latest)]


def build_graph(
    values: Sequence[PerfValue],
    now: Optional[float] = None,
    ttl: Optional[float] = None,
    rtt: Optional[Mapping[Tuple[AgentId, AgentId], float]] = None,
    rtt_weight: float = 0.0,
) -> PlacementGraph:
    """Build the complete graph over the fresh values and its distance matrix.

    With **rtt_weight** > 0, every edge additionally carries
    ``rtt_weight * rtt(i, j) / max(rtt)``.

    :raise grid_dsim.exception.PlacementError: If no fresh value remains.
    """
    fresh = fresh_values(values, now, ttl)
    if not fresh:
        raise PlacementError("No fresh performance values to place a job")

    if rtt_weight < 0:
        raise ConfigError(f"Invalid rtt_weight: {rtt_weight}")

    perf = {v.agent: v.value for v in fresh}
    rtt = rtt or {}
    rtt_max = max(rtt.values(), default=0.0)

    g = nx.Graph()
    for a in sorted(perf):
        g.add_node(a, perf=perf[a])

    agents = sorted(perf)
    for i, a in enumerate(agents):
        for b in agents[i + 1 :]:
            w = (perf[a] + perf[b]) / 2
            if rtt_weight > 0 and rtt_max > 0:
                pair_rtt = rtt.get((a, b), rtt.get((b, a), 0.0))
                w += rtt_weight * pair_rtt / rtt_max
            g.add_edge(a, b, weight=w)

    raw = nx.floyd_warshall(g, weight="weight")
    dist = {a: {b: float(raw[a][b]) for b in agents} for a in agents}
    return PlacementGraph(perf, g, dist)


def score_vertices(
    g: PlacementGraph, participating: Set[AgentId]
) -> Dict[AgentId, float]:
    """Mean distance of each vertex to the other participating vertices; a
    vertex with nothing to average keeps its own performance value."""
    scores: Dict[AgentId, float] = {}
    for v in g.vertices:
        remaining = [
            g.dist[v][u] for u in sorted(participating) if u != v and u in g.values
        ]
        scores[v] = sum(remaining) / len(remaining) if remaining else g.values[v]

    return scores


def rank_agents(g: PlacementGraph, participating: Set[AgentId]) -> List[AgentId]:
    """All vertices, best first; ties broken by the smallest agent id."""
    scores = score_vertices(g, participating)
    return sorted(scores, key=lambda a: (scores[a], a))


def score_and_select(g: PlacementGraph, participating: Set[AgentId]) -> AgentId:
    if len(g) == 0:
        raise PlacementError("Cannot select from an empty placement graph")

    return rank_agents(g, participating)[0]
