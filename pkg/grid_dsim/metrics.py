import json
import threading
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Optional, Union

import psutil

from .abc import AbstractMetricsSource
from .exception import ConfigError
from .placement import DEFAULT_WEIGHTS, PerfSample, PerfValue, performance_value
from .typings import AgentId, Json
from .utils import logger

SAMPLE_FIELDS = (
    "cpu_load_norm",
    "mem_used_frac",
    "net_load_norm",
    "lp_count",
    "lp_capacity",
)


def sample_from_json(doc: Json) -> PerfSample:
    unknown = set(doc) - set(SAMPLE_FIELDS) - {"components_cached"}
    if unknown:
        raise ConfigError(f"Unknown metrics fields: {sorted(unknown)}")

    kwargs = {k: doc[k] for k in SAMPLE_FIELDS if k in doc}
    cached = frozenset(doc.get("components_cached", ()))
    return PerfSample(components_cached=cached, **kwargs)


class SyntheticMetrics(AbstractMetricsSource):
    """Fixed, scenario-configured metrics for deterministic runs."""

    def __init__(self, sample: Union[PerfSample, Json, None] = None) -> None:
        if sample is None:
            sample = PerfSample()
        elif isinstance(sample, dict):
            sample = sample_from_json(sample)
        self.current = sample

    def set(self, **fields: float) -> None:
        self.current = replace(self.current, **fields)  # type: ignore[arg-type]

    def sample(self) -> PerfSample:
        return self.current


class HostMetrics(AbstractMetricsSource):
    """Load of the machine the agent runs on, read with psutil.

    :param lp_count: Returns the number of LPs the agent currently hosts.
    :type lp_count: Callable[[], int]
    :param lp_capacity: LPs the agent is sized for.
    :type lp_capacity: int
    :param net_capacity: Bytes per second considered a saturated network.
    :type net_capacity: float
    """

    def __init__(
        self,
        lp_count: Callable[[], int] = lambda: 0,
        lp_capacity: int = 64,
        net_capacity: float = 125_000_000.0,
    ) -> None:
        self.lp_count = lp_count
        self.lp_capacity = lp_capacity
        self.net_capacity = net_capacity
        self.__last_io: Optional[float] = None
        self.__last_at = time.monotonic()
        psutil.cpu_percent(interval=None)

    def __net_load(self) -> float:
        io = psutil.net_io_counters()
        total = float(io.bytes_sent + io.bytes_recv)
        now = time.monotonic()
        load = 0.0
        if self.__last_io is not None and now > self.__last_at:
            rate = (total - self.__last_io) / (now - self.__last_at)
            load = rate / self.net_capacity

        self.__last_io, self.__last_at = total, now
        return load

    def sample(self) -> PerfSample:
        return PerfSample(
            cpu_load_norm=psutil.cpu_percent(interval=None) / 100.0,
            mem_used_frac=psutil.virtual_memory().percent / 100.0,
            net_load_norm=self.__net_load(),
            lp_count=self.lp_count(),
            lp_capacity=self.lp_capacity,
        )


class ReplayMetrics(AbstractMetricsSource):
    """Replays samples from a JSON-lines file, then keeps repeating the last."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.samples: List[PerfSample] = []
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ConfigError(f"Cannot read metrics replay file {path}: {e}")

        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                self.samples.append(sample_from_json(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{n}: {e}")

        if not self.samples:
            raise ConfigError(f"Metrics replay file {path} has no samples")

        self.position = 0

    def sample(self) -> PerfSample:
        s = self.samples[min(self.position, len(self.samples) - 1)]
        self.position += 1
        return s


def sample_metrics(source: AbstractMetricsSource) -> PerfSample:
    s = source.sample()
    if not isinstance(s, PerfSample):
        raise TypeError(f"Metrics source returned {type(s).__name__}")
    return s


def metrics_source(mode: str, **options: object) -> AbstractMetricsSource:
    if mode == "synthetic":
        sample = options.get("sample")
        if not isinstance(sample, (dict, PerfSample)):
            sample = None
        return SyntheticMetrics(sample)
    if mode == "host":
        return HostMetrics()
    if mode == "replay":
        return ReplayMetrics(str(options["path"]))

    raise ValueError(f"Invalid metrics mode: {mode}")


class PerformancePublisher:
    """Turns metrics samples into the agent's published performance value.

    A failing source republishes the previous value flagged as stale.
    """

    def __init__(
        self,
        agent_id: AgentId,
        source: AbstractMetricsSource,
        weights: tuple = DEFAULT_WEIGHTS,
        period: float = 5.0,
    ) -> None:
        self.agent_id = agent_id
        self.source = source
        self.weights = weights
        self.period = period
        self.last: Optional[PerfValue] = None
        self.__stop = threading.Event()
        self.__thread: Optional[threading.Thread] = None

    def publish(self) -> PerfValue:
        try:
            value = performance_value(
                sample_metrics(self.source), self.weights, self.agent_id
            )
        except Exception as e:
            logger.warning(f"Agent {self.agent_id}: metrics sampling failed: {e}")
            if self.last is None:
                value = PerfValue(self.agent_id, 1.0, time.time(), stale=True)
            else:
                value = replace(self.last, stale=True)

        self.last = value
        return value

    def start(self, on_value: Callable[[PerfValue], None]) -> None:
        if self.__thread and self.__thread.is_alive():
            return

        def loop() -> None:
            while not self.__stop.is_set():
                try:
                    on_value(self.publish())
                except Exception as e:
                    logger.warning(f"Agent {self.agent_id}: publishing failed: {e}")
                self.__stop.wait(self.period)

        self.__stop.clear()
        self.__thread = threading.Thread(target=loop, daemon=True)
        self.__thread.start()

    def stop(self) -> None:
        self.__stop.set()
        if self.__thread and self.__thread.is_alive():
            self.__thread.join(timeout=2.0)
