"""Event core: virtual time, event identity and ordering, event queues, and the
logical-process state machine."""

import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import (
    TYPE_CHECKING,
    Any,
    Deque,
    FrozenSet,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Set,
    Tuple,
)

from .exception import CausalityError, DuplicateEventError, StateMachineError
from .typings import ContextId, Json, LpId, Ticks
from .utils import add_ticks, canonical_json, fingerprint

if TYPE_CHECKING:  # pragma: no cover
    from .abc import AbstractProcess

# Framework-originated events (END_OF_RUN) use source 0; LP ids start at 1.
FRAMEWORK_SOURCE = 0


class EventKey(NamedTuple):
    """Total order of events inside a context: (timestamp, source, sequence).

    **source** is the id of the emitting logical process and **sequence** is
    strictly increasing per (source, context).
    """

    timestamp: Ticks
    source: int
    sequence: int


class EventKind(IntEnum):
    GENERIC = 0
    START_NEW_JOB = 1
    STATE_UPDATE = 2
    WAKEUP = 3
    END_OF_RUN = 4


@dataclass(frozen=True)
class SimEvent:
    key: EventKey
    context_id: ContextId
    src_lp: LpId
    dst_lp: LpId
    kind: EventKind = EventKind.GENERIC
    payload: bytes = b"{}"

    @property
    def timestamp(self) -> Ticks:
        return self.key.timestamp

    def data(self) -> Json:
        """Decode the canonical JSON payload."""
        result: Json = json.loads(self.payload.decode("utf-8")) if self.payload else {}
        return result

    def to_json(self) -> Json:
        return {
            "key": list(self.key),
            "context_id": self.context_id,
            "src_lp": self.src_lp,
            "dst_lp": self.dst_lp,
            "kind": int(self.kind),
            "payload": self.payload.decode("utf-8"),
        }

    @classmethod
    def from_json(cls, doc: Json) -> "SimEvent":
        ts, source, seq = doc["key"]
        return cls(
            key=EventKey(int(ts), int(source), int(seq)),
            context_id=int(doc["context_id"]),
            src_lp=int(doc["src_lp"]),
            dst_lp=int(doc["dst_lp"]),
            kind=EventKind(int(doc["kind"])),
            payload=str(doc["payload"]).encode("utf-8"),
        )


def encode_payload(data: Json) -> bytes:
    return canonical_json(data).encode("utf-8")


def event_order_key(e: SimEvent) -> EventKey:
    return e.key


class EventQueue:
    """Min-first container of SimEvents ordered by EventKey.

    Cancellation is lazy: cancelled keys stay in the heap and are skipped.
    """

    def __init__(self, events: Sequence[SimEvent] = ()) -> None:
        self.__heap: List[Tuple[EventKey, SimEvent]] = []
        self.__keys: Set[EventKey] = set()
        self.__cancelled: Set[EventKey] = set()
        for e in events:
            self.push(e)

    def push(self, e: SimEvent) -> None:
        if e.key in self.__keys:
            raise DuplicateEventError(f"Duplicate event key {tuple(e.key)}")

        self.__keys.add(e.key)
        heapq.heappush(self.__heap, (event_order_key(e), e))

    def __prune(self) -> None:
        while self.__heap and self.__heap[0][0] in self.__cancelled:
            key, _ = heapq.heappop(self.__heap)
            self.__cancelled.discard(key)
            self.__keys.discard(key)

    def peek(self) -> Optional[SimEvent]:
        self.__prune()
        return self.__heap[0][1] if self.__heap else None

    def pop(self) -> SimEvent:
        self.__prune()
        if not self.__heap:
            raise IndexError("pop from an empty EventQueue")

        key, e = heapq.heappop(self.__heap)
        self.__keys.discard(key)
        return e

    def cancel(self, key: EventKey) -> bool:
        """Cancel a queued event. Returns False if **key** is not queued."""
        if key not in self.__keys or key in self.__cancelled:
            return False

        self.__cancelled.add(key)
        return True

    def __contains__(self, key: object) -> bool:
        return key in self.__keys and key not in self.__cancelled

    def __len__(self) -> int:
        return len(self.__keys) - len(self.__cancelled)

    def __bool__(self) -> bool:
        return len(self) > 0

    def __iter__(self) -> Iterator[SimEvent]:
        """Iterate live events in key order (does not consume)."""
        for key, e in sorted(self.__heap):
            if key not in self.__cancelled:
                yield e


def enqueue(q: EventQueue, e: SimEvent) -> EventQueue:
    q.push(e)
    return q


def peek_min_across(queues: Sequence[EventQueue]) -> Optional[Tuple[int, SimEvent]]:
    best: Optional[Tuple[int, SimEvent]] = None
    for i, q in enumerate(queues):
        e = q.peek()
        if e is not None and (best is None or event_order_key(e) < best[1].key):
            best = (i, e)

    return best


###################
# Logical process #
###################


class LpState(IntEnum):
    CREATED = 0
    READY = 1
    RUNNING = 2
    WAITING = 3
    FINISHED = 4


LEGAL_TRANSITIONS: FrozenSet[Tuple[LpState, LpState]] = frozenset(
    {
        (LpState.CREATED, LpState.READY),
        (LpState.READY, LpState.RUNNING),
        (LpState.RUNNING, LpState.WAITING),
        (LpState.RUNNING, LpState.FINISHED),
        (LpState.WAITING, LpState.READY),
    }
)


@dataclass
class Worker:
    index: int
    lp: Optional[LpId] = None


class WorkerPool:
    """Fixed pool of workers executing logical processes.

    An LP that asks for a worker while none is free joins a FIFO admission queue
    and is handed the next released worker.
    """

    def __init__(self, size: int = 4) -> None:
        if size < 1:
            raise ValueError(f"Invalid worker pool size: {size}")

        self.size = size
        self.__free: Deque[Worker] = deque(Worker(i) for i in range(size))
        self.admission: Deque["LogicalProcess"] = deque()

    @property
    def free(self) -> int:
        return len(self.__free)

    def acquire(self, lp: "LogicalProcess") -> Optional[Worker]:
        if not self.__free:
            if lp not in self.admission:
                self.admission.append(lp)
            return None

        worker = self.__free.popleft()
        worker.lp = lp.id
        return worker

    def release(self, worker: Worker) -> Optional["LogicalProcess"]:
        """Return **worker** to the pool; returns the LP admitted next, if any."""
        worker.lp = None
        self.__free.append(worker)

        if self.admission:
            lp = self.admission.popleft()
            lp.worker = self.acquire(lp)
            lp.state = LpState.READY
            return lp

        return None


@dataclass(eq=False)
class LogicalProcess:
    id: LpId
    behavior: "AbstractProcess"
    state: LpState = LpState.CREATED
    local_clock: Ticks = 0
    worker: Optional[Worker] = None
    last_key: Optional[EventKey] = None
    next_sequence: int = 0
    rng: random.Random = field(default_factory=random.Random)

    def seed(self, run_seed: int) -> None:
        self.rng.seed(fingerprint(f"{run_seed}:{self.id}"))

    def take_sequence(self) -> int:
        seq = self.next_sequence
        self.next_sequence += 1
        return seq

    def deliver(self, key: EventKey) -> None:
        """Advance the LP clock to **key**'s timestamp.

        A self-addressed event emitted at the current clock may carry a smaller
        key than the event being handled, so only timestamps must not decrease.
        """
        if key == self.last_key:
            m = f"LP {self.id} received {tuple(key)} twice"
            raise CausalityError(m, virtual_time=key.timestamp)

        if key.timestamp < self.local_clock:
            m = f"LP {self.id} clock {self.local_clock} > event time {key.timestamp}"
            raise CausalityError(m, virtual_time=key.timestamp)

        self.last_key = key
        self.local_clock = key.timestamp


def lp_transition(
    lp: LogicalProcess, target: LpState, pool: Optional[WorkerPool] = None
) -> LogicalProcess:
    """Move **lp** to **target**, binding or releasing a worker of **pool**.

    Entering READY binds a worker; if the pool has none free the LP stays in its
    current state inside the pool's admission queue. Leaving RUNNING releases it.

    :raise StateMachineError: On a transition outside the legal set.
    """
    if (lp.state, target) not in LEGAL_TRANSITIONS:
        m = f"Illegal LP transition {lp.state.name} -> {target.name} (LP {lp.id})"
        raise StateMachineError(m)

    if target == LpState.READY and pool is not None and lp.worker is None:
        lp.worker = pool.acquire(lp)
        if lp.worker is None:
            return lp

    if target in (LpState.WAITING, LpState.FINISHED) and lp.worker is not None:
        worker, lp.worker = lp.worker, None
        if pool is not None:
            pool.release(worker)

    lp.state = target
    return lp


class ProcessContext:
    """The view a logical process gets of the engine while handling one event.

    Emitted events, cancellations and result records are buffered here and handed
    back to the owning engine loop once the handler returns.
    """

    def __init__(
        self,
        lp: LogicalProcess,
        context_id: ContextId,
        now: Ticks,
        lookahead: Ticks,
        services: Any = None,
    ) -> None:
        self.lp = lp
        self.context_id = context_id
        self.now = now
        self.lookahead = lookahead
        self.services = services
        self.emitted: List[SimEvent] = []
        self.cancelled: List[EventKey] = []
        self.records: List[Tuple[str, float, Json]] = []
        self.finished = False

    @property
    def lp_id(self) -> LpId:
        return self.lp.id

    @property
    def rng(self) -> random.Random:
        return self.lp.rng

    def send(
        self,
        dst_lp: LpId,
        timestamp: Ticks,
        data: Optional[Json] = None,
        kind: EventKind = EventKind.GENERIC,
    ) -> SimEvent:
        earliest = self.now
        if dst_lp != self.lp.id:
            earliest = add_ticks(self.now, self.lookahead)

        if timestamp < earliest:
            m = (
                f"LP {self.lp.id} emits to LP {dst_lp} at {timestamp}, "
                f"earliest allowed is {earliest}"
            )
            raise CausalityError(m, virtual_time=self.now)

        key = EventKey(timestamp, self.lp.id, self.lp.take_sequence())
        payload = encode_payload(data or {})
        e = SimEvent(key, self.context_id, self.lp.id, dst_lp, kind, payload)
        self.emitted.append(e)
        return e

    def send_after(
        self,
        dst_lp: LpId,
        delay: Ticks,
        data: Optional[Json] = None,
        kind: EventKind = EventKind.GENERIC,
    ) -> SimEvent:
        return self.send(dst_lp, add_ticks(self.now, delay), data, kind)

    def wakeup(self, timestamp: Ticks, data: Optional[Json] = None) -> SimEvent:
        return self.send(self.lp.id, timestamp, data, EventKind.WAKEUP)

    def cancel(self, key: EventKey) -> None:
        self.cancelled.append(key)

    def record(self, metric: str, value: float, **tags: Any) -> None:
        str_tags = {k: str(v) for k, v in tags.items()}
        self.records.append((metric, float(value), str_tags))

    def finish(self) -> None:
        self.finished = True
