import json
import logging
import os
from datetime import timedelta
from typing import Any, Union

import farmhash
import isodate
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn

from .exception import ConfigError

logger = logging.getLogger(__package__)
handler = logging.StreamHandler()
formatter = logging.Formatter(
    f"[%(asctime)s] [{os.getpid()}] [%(levelname)s] - %(name)s: %(message)s",
    "%Y/%m/%d %H:%M:%S %z",
)
handler.setFormatter(formatter)
logger.addHandler(handler)

TICKS_PER_SECOND = 1_000_000
MAX_TICKS = 2**63 - 1
ID_MASK = 2**63 - 1


def get_run_progress(text: str) -> Progress:
    return Progress(
        TextColumn(text),
        SpinnerColumn("aesthetic", "#5BC0DE"),
        TextColumn("t={task.fields[vt]}"),
        TextColumn("events={task.fields[events]}"),
        TimeElapsedColumn(),
        transient=True,
    )


def canonical_json(obj: Any) -> str:
    """Sorted-key, whitespace-free JSON. The encoding used for frame payloads,
    event payloads and manifests, so equal objects always give equal bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(text: str) -> int:
    """FarmHash Fingerprint64 of **text**, masked to a positive 63-bit integer.

    Stable across processes and platforms (unlike the builtin `hash`).
    """
    return int(farmhash.Fingerprint64(text)) & ID_MASK


def add_ticks(a: int, b: int) -> int:
    result = a + b
    if result > MAX_TICKS or result < -MAX_TICKS - 1:
        raise OverflowError(f"virtual time overflow: {a} + {b}")

    return result


def to_ticks(value: Union[int, float, str]) -> int:
    """Convert a scenario time value into virtual-time ticks.

    Integers are taken as ticks, floats as seconds and strings as ISO-8601
    durations (e.g. ``"PT0.5S"``).
    """
    if isinstance(value, bool):
        raise ConfigError(f"Invalid time value: {value!r}")

    if isinstance(value, int):
        return value

    if isinstance(value, float):
        return round(value * TICKS_PER_SECOND)

    if isinstance(value, str):
        try:
            duration = isodate.parse_duration(value)
        except (isodate.ISO8601Error, ValueError) as e:
            raise ConfigError(f"Invalid ISO-8601 duration '{value}': {e}")

        if not isinstance(duration, timedelta):
            # isodate.Duration (years/months) has no fixed length
            raise ConfigError(f"Calendar durations are not supported: '{value}'")

        return (
            duration.days * 86_400 * TICKS_PER_SECOND
            + duration.seconds * TICKS_PER_SECOND
            + duration.microseconds
        )

    raise ConfigError(f"Invalid time value: {value!r}")
