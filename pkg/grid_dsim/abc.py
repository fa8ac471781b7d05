#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from abc import ABC
from typing import Any, Callable, List, Optional, Sequence, Set

from .events import ProcessContext, SimEvent
from .typings import AgentId, ContextId, Json, LpId


class AbstractProcess(ABC):
    """Behavior of a logical process: invoked once per delivered event."""

    kind = "abstract"

    def handle(self, ctx: ProcessContext, event: SimEvent) -> None:
        raise NotImplementedError  # pragma: no cover

    def is_idle(self) -> bool:
        """True if the process can accept a new job (LP reuse)."""
        return False

    def finalize(self, ctx: ProcessContext) -> None:
        """Called once at the end of the run, with the clock at the horizon.
        May record results but not emit events."""
        return None


class AbstractMetricsSource(ABC):
    def sample(self) -> Any:
        raise NotImplementedError  # pragma: no cover


class AbstractTransport(ABC):
    def start(self, agent_id: AgentId, deliver: Callable[[bytes], None]) -> None:
        raise NotImplementedError  # pragma: no cover

    def send(self, dst: AgentId, frame: bytes) -> None:
        raise NotImplementedError  # pragma: no cover

    def reachable(self, dst: AgentId) -> bool:
        raise NotImplementedError  # pragma: no cover

    def stop(self) -> None:
        raise NotImplementedError  # pragma: no cover


class AbstractPlacementController(ABC):
    def performance_value(self, sample: Any, agent: AgentId) -> Any:
        raise NotImplementedError  # pragma: no cover

    def select_agent(
        self, values: Sequence[Any], participating: Set[AgentId]
    ) -> AgentId:
        raise NotImplementedError  # pragma: no cover

    def rank_agents(
        self, values: Sequence[Any], participating: Set[AgentId]
    ) -> List[AgentId]:
        raise NotImplementedError  # pragma: no cover


class AbstractSimulationAgent(ABC):
    def __init__(self) -> None:
        raise NotImplementedError  # pragma: no cover

    def create_context(
        self, context_id: ContextId, participants: Set[AgentId], scenario: Json
    ) -> None:
        raise NotImplementedError  # pragma: no cover

    def destroy_context(self, context_id: ContextId) -> None:
        raise NotImplementedError  # pragma: no cover

    def route_message(self, frame: bytes) -> None:
        raise NotImplementedError  # pragma: no cover

    def publish_performance(self) -> Optional[Any]:
        raise NotImplementedError  # pragma: no cover


class AbstractContextServices(ABC):
    """What the hosting agent offers to the logical processes of a context."""

    def place_job(
        self, ctx: ProcessContext, job_id: str, kind: str, params: Json
    ) -> LpId:
        raise NotImplementedError  # pragma: no cover

    def replica(self, component_id: str) -> Optional[Any]:
        raise NotImplementedError  # pragma: no cover
