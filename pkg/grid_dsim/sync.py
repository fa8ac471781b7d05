"""Conservative synchronization with null messages sent on demand.

One :class:`SyncState` exists per (agent, context). It keeps one event queue per
remote agent, one for the local logical processes, and the table of the last
known virtual-time bound of every remote agent. All functions here are meant to
be called from the single engine loop that owns the state.
"""

import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

from .events import (
    EventKey,
    EventKind,
    EventQueue,
    SimEvent,
    event_order_key,
    peek_min_across,
)
from .exception import CausalityError, ProtocolError, RoutingError
from .typings import AgentId, ContextId, LpId, Ticks
from .utils import add_ticks, logger

UNKNOWN = None


class LvtTable:
    """Last known virtual-time bound of every remote agent of a context.

    A bound is either UNKNOWN (``None``) or a tick value that only ever grows.
    """

    def __init__(self, agents: Iterable[AgentId]) -> None:
        self.entries: Dict[AgentId, Optional[Ticks]] = {a: UNKNOWN for a in agents}

    def __contains__(self, agent: object) -> bool:
        return agent in self.entries

    def __getitem__(self, agent: AgentId) -> Optional[Ticks]:
        return self.entries[agent]

    def raise_to(self, agent: AgentId, value: Ticks) -> bool:
        """Monotone-max update, UNKNOWN counting as minus infinity.

        :return: True if the bound advanced.
        """
        current = self.entries[agent]
        if current is UNKNOWN or value > current:
            self.entries[agent] = value
            return True

        return False


class MessageKind(IntEnum):
    EVENT = 0x01
    LVT_REQUEST = 0x02
    LVT_RESPONSE = 0x03


@dataclass(frozen=True)
class SyncMessage:
    kind: MessageKind
    context_id: ContextId
    sender: AgentId
    recipient: AgentId = 0
    event: Optional[SimEvent] = None
    requester_clock: Ticks = 0
    threshold: Ticks = 0
    guarantee: Ticks = 0
    # Per (sender, context) channel sequence; -1 skips the FIFO check.
    channel_seq: int = -1


class StepStatus(Enum):
    PROCESSED = "processed"
    BLOCKED = "blocked"
    IDLE = "idle"
    FINISHED = "finished"


@dataclass
class StepOutcome:
    status: StepStatus
    event: Optional[SimEvent] = None
    blocked_on: List[AgentId] = field(default_factory=list)
    outgoing: List[SyncMessage] = field(default_factory=list)


# Handler invoked for every safe event; returns the events its LP emitted.
Dispatcher = Callable[[SimEvent], List[SimEvent]]


@dataclass
class SyncState:
    agent_id: AgentId
    context_id: ContextId
    remotes: Set[AgentId]
    routes: Dict[LpId, AgentId]
    horizon: Ticks
    lookahead: Ticks = 1
    strict_ties: bool = True

    def __post_init__(self) -> None:
        if self.lookahead < 0:
            raise ValueError(f"Invalid lookahead: {self.lookahead}")

        if self.horizon <= 0:
            raise ValueError(f"Invalid horizon: {self.horizon}")

        self.remote_queues: Dict[AgentId, EventQueue] = {
            r: EventQueue() for r in sorted(self.remotes)
        }
        self.local_queue = EventQueue()
        self.lvt_table = LvtTable(sorted(self.remotes))
        self.local_clock: Ticks = 0
        self.pending_requests: Dict[AgentId, Ticks] = {}
        self.outbox: Dict[AgentId, EventQueue] = {
            r: EventQueue() for r in sorted(self.remotes)
        }
        self.finished = False
        self.blocked = False

        self.__guarantee_floor: Ticks = 0
        self.__sent_guarantee: Dict[AgentId, Ticks] = {}
        self.__requested: Set[AgentId] = set()
        self.__seq_out: Dict[AgentId, int] = {r: 0 for r in self.remotes}
        self.__seq_in: Dict[AgentId, int] = {r: 0 for r in self.remotes}

        self.events_processed = 0
        self.sync_messages_sent = 0
        self.sync_messages_received = 0
        self.requests_sent = 0
        self.responses_sent = 0
        self.blocking_episodes = 0
        self.last_progress = time.monotonic()

    ###########
    # Helpers #
    ###########

    def queues(self) -> List[EventQueue]:
        remote = [self.remote_queues[r] for r in sorted(self.remotes)]
        return [self.local_queue] + remote

    def check_sender(self, m: SyncMessage) -> None:
        if m.context_id != self.context_id:
            msg = f"Message for context {m.context_id} routed to {self.context_id}"
            raise ProtocolError(msg, agent=self.agent_id)

        if m.sender not in self.remotes:
            msg = f"Unknown sender {m.sender} in context {self.context_id}"
            raise ProtocolError(msg, agent=self.agent_id)

        if m.channel_seq >= 0:
            expected = self.__seq_in[m.sender]
            if m.channel_seq != expected:
                msg = (
                    f"FIFO violation from agent {m.sender}: "
                    f"sequence {m.channel_seq}, expected {expected}"
                )
                raise ProtocolError(msg, agent=self.agent_id)

            self.__seq_in[m.sender] = expected + 1

    def advance_bound(self, agent: AgentId, value: Ticks) -> None:
        if self.lvt_table.raise_to(agent, value):
            self.last_progress = time.monotonic()

    def message(
        self, kind: MessageKind, recipient: AgentId, **fields: object
    ) -> SyncMessage:
        seq = self.__seq_out[recipient]
        self.__seq_out[recipient] = seq + 1
        if kind != MessageKind.EVENT:
            self.sync_messages_sent += 1
        if kind == MessageKind.LVT_REQUEST:
            self.requests_sent += 1
        elif kind == MessageKind.LVT_RESPONSE:
            self.responses_sent += 1

        return SyncMessage(
            kind,
            self.context_id,
            self.agent_id,
            recipient,
            channel_seq=seq,
            **fields,  # type: ignore[arg-type]
        )

    def effective_guarantee(self, remote: AgentId) -> Ticks:
        """Guarantee promised to **remote**: never above its earliest unsent event."""
        g = compute_guarantee(self)
        head = self.outbox[remote].peek()
        return min(g, head.timestamp) if head is not None else g

    def flush(self) -> List[SyncMessage]:
        """Release outbox events covered by the guarantee, then refresh the
        answers owed to pending LVT requests."""
        out: List[SyncMessage] = []
        g = compute_guarantee(self)

        for r in sorted(self.remotes):
            box = self.outbox[r]
            head = box.peek()
            while head is not None and head.timestamp <= g:
                out.append(self.message(MessageKind.EVENT, r, event=box.pop()))
                head = box.peek()

        for r in sorted(self.pending_requests):
            threshold = self.pending_requests[r]
            eff = self.effective_guarantee(r)
            if eff > self.__sent_guarantee.get(r, -1):
                out.append(self.respond(r, eff))

            if eff >= threshold:
                del self.pending_requests[r]

        return out

    def respond(self, remote: AgentId, guarantee: Ticks) -> SyncMessage:
        self.__sent_guarantee[remote] = guarantee
        return self.message(MessageKind.LVT_RESPONSE, remote, guarantee=guarantee)

    def guarantee_floor(self, g: Ticks) -> Ticks:
        self.__guarantee_floor = max(self.__guarantee_floor, g)
        return self.__guarantee_floor

    def start_episode(self) -> None:
        self.__requested.clear()

    def request_once(
        self, remote: AgentId, threshold: Ticks
    ) -> Optional[SyncMessage]:
        if remote in self.__requested:
            return None

        self.__requested.add(remote)
        return self.message(
            MessageKind.LVT_REQUEST,
            remote,
            requester_clock=self.local_clock,
            threshold=threshold,
        )

    def schedule_local(self, e: SimEvent) -> None:
        self.local_queue.push(e)


##############
# Operations #
##############


def on_event_received(s: SyncState, m: SyncMessage) -> List[SyncMessage]:
    s.check_sender(m)
    if m.event is None:
        raise ProtocolError("EVENT message without an event", agent=s.agent_id)

    e = m.event
    bound = s.lvt_table[m.sender]
    if e.kind != EventKind.START_NEW_JOB and bound is not None and e.timestamp < bound:
        msg = f"Event {tuple(e.key)} from agent {m.sender} is below its bound {bound}"
        raise ProtocolError(msg, agent=s.agent_id, virtual_time=e.timestamp)

    s.remote_queues[m.sender].push(e)
    if e.kind != EventKind.START_NEW_JOB:
        s.advance_bound(m.sender, e.timestamp)

    return s.flush()


def on_lvt_request(s: SyncState, m: SyncMessage) -> List[SyncMessage]:
    s.check_sender(m)
    s.sync_messages_received += 1
    s.advance_bound(m.sender, m.requester_clock)
    s.pending_requests.pop(m.sender, None)

    out = s.flush()
    eff = s.effective_guarantee(m.sender)
    out.append(s.respond(m.sender, eff))
    if eff < m.threshold:
        s.pending_requests[m.sender] = m.threshold

    return out


def on_lvt_response(s: SyncState, m: SyncMessage) -> List[SyncMessage]:
    s.check_sender(m)
    s.sync_messages_received += 1
    s.advance_bound(m.sender, m.guarantee)
    return s.flush()


def compute_guarantee(s: SyncState) -> Ticks:
    """Lowest timestamp any future EVENT sent by this agent can carry."""
    if s.finished:
        return s.guarantee_floor(add_ticks(s.horizon, s.lookahead))

    candidates: List[Ticks] = []
    for q in s.queues():
        head = q.peek()
        if head is not None:
            candidates.append(head.timestamp)

    for r in s.remotes:
        bound = s.lvt_table[r]
        candidates.append(s.local_clock if bound is UNKNOWN else bound)

    lower = min(candidates) if candidates else s.horizon
    lower = max(s.local_clock, min(lower, s.horizon))
    return s.guarantee_floor(add_ticks(lower, s.lookahead))


def is_safe(
    s: SyncState, candidate: SimEvent, threshold: Optional[Ticks] = None
) -> Tuple[bool, List[AgentId]]:
    """Every remote bound must be KNOWN and at least the candidate's timestamp
    (or **threshold** when given).

    :return: Whether the candidate is safe, and the agents violating the rule.
    """
    limit = candidate.timestamp if threshold is None else threshold
    violators = []
    for r in sorted(s.remotes):
        bound = s.lvt_table[r]
        if bound is UNKNOWN or bound < limit:
            violators.append(r)

    return not violators, violators


def step(s: SyncState, dispatch: Dispatcher) -> StepOutcome:
    if s.finished:
        return StepOutcome(StepStatus.FINISHED, outgoing=s.flush())

    found = peek_min_across(s.queues())
    if found is None:
        s.blocked = False
        return StepOutcome(StepStatus.IDLE, outgoing=s.flush())

    index, candidate = found
    if candidate.kind == EventKind.END_OF_RUN or not s.strict_ties:
        threshold = candidate.timestamp
    else:
        threshold = add_ticks(candidate.timestamp, 1)

    safe, violators = is_safe(s, candidate, threshold)
    if not safe:
        out: List[SyncMessage] = []
        for r in violators:
            request = s.request_once(r, threshold)
            if request is not None:
                out.append(request)

        if not s.blocked:
            logger.debug(
                f"Agent {s.agent_id} ctx {s.context_id}: blocked at "
                f"{tuple(candidate.key)} on {violators}"
            )
            s.blocked = True
            s.blocking_episodes += 1
            s.last_progress = time.monotonic()

        out.extend(s.flush())
        return StepOutcome(StepStatus.BLOCKED, candidate, violators, out)

    s.blocked = False
    s.start_episode()
    e = s.queues()[index].pop()
    if e.timestamp < s.local_clock:
        msg = f"Event {tuple(e.key)} is older than the local clock {s.local_clock}"
        raise CausalityError(msg, agent=s.agent_id, virtual_time=s.local_clock)

    s.local_clock = e.timestamp
    s.last_progress = time.monotonic()

    if e.kind == EventKind.END_OF_RUN:
        s.finished = True
        return StepOutcome(StepStatus.FINISHED, e, outgoing=s.flush())

    s.events_processed += 1
    for emitted in sorted(dispatch(e), key=event_order_key):
        if emitted.timestamp >= s.horizon:
            continue

        owner = s.routes.get(emitted.dst_lp)
        if owner is None:
            msg = f"No route to LP {emitted.dst_lp}"
            raise RoutingError(msg, agent=s.agent_id, virtual_time=e.timestamp)

        if owner == s.agent_id:
            s.local_queue.push(emitted)
        else:
            s.outbox[owner].push(emitted)

    return StepOutcome(StepStatus.PROCESSED, e, outgoing=s.flush())


def detect_deadlock(
    s: SyncState, wall_timeout: float, now: Optional[float] = None
) -> Optional[str]:
    """Diagnose a blocked state whose bounds have not advanced for **wall_timeout**
    seconds of wall-clock time."""
    if not s.blocked or s.finished:
        return None

    now = time.monotonic() if now is None else now
    if now - s.last_progress < wall_timeout:
        return None

    found = peek_min_across(s.queues())
    head: Optional[EventKey] = found[1].key if found else None
    waits = ", ".join(
        f"agent {r} bound={'UNKNOWN' if s.lvt_table[r] is None else s.lvt_table[r]}"
        for r in sorted(s.remotes)
    )
    return (
        f"Deadlock: agent {s.agent_id} (context {s.context_id}, clock "
        f"{s.local_clock}) blocked on event {tuple(head) if head else None} "
        f"waiting for [{waits}] for {now - s.last_progress:.1f}s "
        f"(lookahead={s.lookahead})"
    )


def handle_message(s: SyncState, m: SyncMessage) -> List[SyncMessage]:
    if m.kind == MessageKind.EVENT:
        return on_event_received(s, m)
    if m.kind == MessageKind.LVT_REQUEST:
        return on_lvt_request(s, m)
    if m.kind == MessageKind.LVT_RESPONSE:
        return on_lvt_response(s, m)

    raise ProtocolError(f"Unexpected sync message kind {m.kind}", agent=s.agent_id)
