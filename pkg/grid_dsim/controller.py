#!/usr/bin/env python3
import time
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

from .abc import AbstractPlacementController
from .exception import PlacementError
from .placement import (
    DEFAULT_STALE_TTL,
    DEFAULT_WEIGHTS,
    PerfSample,
    PerfValue,
    build_graph,
    check_weights,
    performance_value,
    rank_agents,
)
from .typings import AgentId, LpId


class PlacementController(AbstractPlacementController):
    """Controller used by the job scheduler of every simulation agent.

    Responsible for turning metrics samples into performance values, and for
    picking the agent that hosts a new simulation job.

    This system is a work-in-progress. Users are welcome to overwrite
    `performance_value` or `rank_agents` via their own subclass, and pass
    an instance to the agent or the client.

    :param weights: The weights of cpu load, memory use, LP occupancy and
        network load in the performance value. Must sum to 1.
    :type weights: Sequence[float]
    :param stale_ttl: Values sampled more than this many seconds ago are
        ignored. Pass None to keep every value (deterministic runs).
    :type stale_ttl: float | None
    :param rtt_weight: Weight of the normalized round-trip time added to every
        edge of the placement graph. 0 disables the extended mode.
    :type rtt_weight: float
    """

    def __init__(
        self,
        weights: Sequence[float] = DEFAULT_WEIGHTS,
        stale_ttl: Optional[float] = DEFAULT_STALE_TTL,
        rtt_weight: float = 0.0,
    ) -> None:
        self.weights = check_weights(weights)
        self.stale_ttl = stale_ttl
        self.rtt_weight = rtt_weight
        self.rtt: Dict[Tuple[AgentId, AgentId], float] = {}

    def performance_value(
        self, sample: PerfSample, agent: AgentId, sampled_at: Optional[float] = None
    ) -> PerfValue:
        return performance_value(sample, self.weights, agent, sampled_at)

    def rank_agents(
        self, values: Sequence[PerfValue], participating: Set[AgentId]
    ) -> List[AgentId]:
        """Rank agents for a new job, best first. The scheduler tries them in
        this order when the preferred agent turns out to be unreachable.

        :param values: The latest published performance values.
        :type values: Sequence[grid_dsim.placement.PerfValue]
        :param participating: Agents already taking part in the run.
        :type participating: Set[int]
        :return: Every agent with a fresh value, best first.
        :rtype: List[int]
        :raise grid_dsim.exception.PlacementError: If no value is fresh.
        """
        g = build_graph(
            values,
            now=time.time(),
            ttl=self.stale_ttl,
            rtt=self.rtt,
            rtt_weight=self.rtt_weight,
        )
        return rank_agents(g, participating)

    def select_agent(
        self, values: Sequence[PerfValue], participating: Set[AgentId]
    ) -> AgentId:
        return self.rank_agents(values, participating)[0]

    def plan(
        self,
        lp_ids: Sequence[LpId],
        samples: Mapping[AgentId, PerfSample],
    ) -> Dict[LpId, AgentId]:
        """Place the initial LPs of a scenario one after the other, counting
        the LPs already planned on each agent as load.

        :param lp_ids: The LPs to place, in placement order.
        :type lp_ids: Sequence[int]
        :param samples: One metrics sample per candidate agent.
        :type samples: Mapping[int, grid_dsim.placement.PerfSample]
        :return: The agent chosen for every LP.
        :rtype: Dict[int, int]
        """
        if not samples:
            raise PlacementError("No agents to plan a placement on")

        planned = {a: 0 for a in samples}
        result: Dict[LpId, AgentId] = {}
        for lp in lp_ids:
            values = [
                self.performance_value(
                    s.with_lp_count(s.lp_count + planned[a]), a, sampled_at=0.0
                )
                for a, s in sorted(samples.items())
            ]
            g = build_graph(values, rtt=self.rtt, rtt_weight=self.rtt_weight)
            used = {a for a, n in planned.items() if n > 0}
            agent = rank_agents(g, used)[0]
            planned[agent] += 1
            result[lp] = agent

        return result
