import json
import threading
from pathlib import Path
from typing import List

import pytest

from grid_dsim.abc import AbstractMetricsSource
from grid_dsim.exception import ConfigError
from grid_dsim.metrics import (
    HostMetrics,
    PerformancePublisher,
    ReplayMetrics,
    SyntheticMetrics,
    metrics_source,
    sample_from_json,
)
from grid_dsim.placement import PerfSample, PerfValue


class Flaky(AbstractMetricsSource):
    def __init__(self, fail_after: int) -> None:
        self.calls = 0
        self.fail_after = fail_after

    def sample(self) -> PerfSample:
        self.calls += 1
        if self.calls > self.fail_after:
            raise RuntimeError("sensor gone")
        return PerfSample(cpu_load_norm=0.4)


def write_lines(path: Path, docs: List[object]) -> Path:
    path.write_text("\n".join(json.dumps(d) for d in docs) + "\n")
    return path


def test_synthetic() -> None:
    source = SyntheticMetrics({"cpu_load_norm": 0.5, "lp_count": 2, "lp_capacity": 4})
    assert source.sample() == PerfSample(0.5, lp_count=2, lp_capacity=4)

    source.set(net_load_norm=0.25)
    assert source.sample().net_load_norm == 0.25
    assert SyntheticMetrics().sample() == PerfSample()


def test_sample_from_json() -> None:
    s = sample_from_json({"mem_used_frac": 0.3, "components_cached": ["T0.db"]})
    assert s.mem_used_frac == 0.3
    assert s.components_cached == frozenset({"T0.db"})

    with pytest.raises(ConfigError):
        sample_from_json({"gpu_load": 1.0})


def test_replay_repeats_last(tmp_path: Path) -> None:
    path = write_lines(
        tmp_path / "m.jsonl",
        [{"cpu_load_norm": 0.1}, {"cpu_load_norm": 0.2}, {"cpu_load_norm": 0.3}],
    )
    source = ReplayMetrics(path)
    got = [source.sample().cpu_load_norm for _ in range(5)]
    assert got == [0.1, 0.2, 0.3, 0.3, 0.3]


@pytest.mark.parametrize(
    "content", ["", "\n\n", '{"cpu_load_norm": 0.1}\n{oops\n', '{"disk": 1}\n']
)
def test_replay_invalid(tmp_path: Path, content: str) -> None:
    path = tmp_path / "m.jsonl"
    path.write_text(content)
    with pytest.raises(ConfigError):
        ReplayMetrics(path)


def test_host_metrics() -> None:
    s = HostMetrics(lp_count=lambda: 3, lp_capacity=8).sample()
    for value in (s.cpu_load_norm, s.mem_used_frac, s.net_load_norm):
        assert 0.0 <= value <= 1.0
    assert (s.lp_count, s.lp_capacity) == (3, 8)


def test_metrics_source(tmp_path: Path) -> None:
    path = write_lines(tmp_path / "m.jsonl", [{"cpu_load_norm": 0.7}])
    assert isinstance(metrics_source("synthetic"), SyntheticMetrics)
    assert isinstance(metrics_source("host"), HostMetrics)
    replay = metrics_source("replay", path=path)
    assert isinstance(replay, ReplayMetrics)
    assert replay.sample().cpu_load_norm == 0.7

    with pytest.raises(ValueError):
        metrics_source("psychic")


def test_publisher_marks_stale() -> None:
    publisher = PerformancePublisher(3, Flaky(fail_after=1), weights=(1, 0, 0, 0))

    first = publisher.publish()
    assert (first.agent, first.value, first.stale) == (3, 0.4, False)

    second = publisher.publish()
    assert second.stale
    assert second.value == first.value
    assert second.sampled_at == first.sampled_at


def test_publisher_without_history() -> None:
    value = PerformancePublisher(5, Flaky(fail_after=0)).publish()
    assert value.stale
    assert value.value == 1.0
    assert value.agent == 5


def test_publisher_loop() -> None:
    got: List[PerfValue] = []
    enough = threading.Event()

    def on_value(v: PerfValue) -> None:
        got.append(v)
        if len(got) >= 3:
            enough.set()

    publisher = PerformancePublisher(1, SyntheticMetrics(), period=0.01)
    publisher.start(on_value)
    try:
        assert enough.wait(timeout=5)
    finally:
        publisher.stop()

    assert all(v.agent == 1 and v.value == 0.0 and not v.stale for v in got)
