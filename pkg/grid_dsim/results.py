"""The result pool: records streamed back by the agents, and their export.

An exported run is a directory holding ``records.csv`` (columns
``context_id, metric, virtual_time, value, tags``) and ``manifest.json``. The
manifest carries the FarmHash fingerprint of the CSV text, checked on import.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .exception import ContextError, IntegrityError
from .typings import ContextId, Json, LpId, Tags, Ticks
from .utils import canonical_json, fingerprint, logger

CSV_COLUMNS = ("context_id", "metric", "virtual_time", "value", "tags")
RECORDS_FILE = "records.csv"
MANIFEST_FILE = "manifest.json"

Series = Tuple[str, Tags]


def make_tags(tags: Mapping[str, object]) -> Tags:
    return tuple(sorted((str(k), str(v)) for k, v in tags.items()))


@dataclass(frozen=True)
class ResultRecord:
    context_id: ContextId
    metric: str
    virtual_time: Ticks
    value: float
    tags: Tags = ()
    # Emission order inside the run: (virtual time, LP, per-LP sequence)
    order: Tuple[Ticks, LpId, int] = field(default=(0, 0, 0), compare=False)

    @property
    def series(self) -> Series:
        return self.metric, self.tags

    def tag(self, key: str) -> Optional[str]:
        for k, v in self.tags:
            if k == key:
                return v
        return None

    def csv_row(self) -> List[str]:
        return [
            str(self.context_id),
            self.metric,
            str(self.virtual_time),
            repr(float(self.value)),
            canonical_json(dict(self.tags)),
        ]

    @classmethod
    def from_wire(cls, context_id: ContextId, doc: Json) -> "ResultRecord":
        vt = int(doc["vt"])
        return cls(
            context_id,
            str(doc["metric"]),
            vt,
            float(doc["value"]),
            make_tags(doc.get("tags", {})),
            (vt, int(doc.get("lp", 0)), int(doc.get("seq", 0))),
        )


class ResultPool:
    """Append-only store of the records of one run, plus its manifest."""

    def __init__(self, context_id: ContextId, manifest: Optional[Json] = None):
        self.context_id = context_id
        self.manifest: Json = dict(manifest or {})
        self.records: List[ResultRecord] = []
        self.__last: Dict[Series, Ticks] = {}

    def __len__(self) -> int:
        return len(self.records)

    def last_time(self, series: Series) -> Optional[Ticks]:
        return self.__last.get(series)

    def note(self, r: ResultRecord) -> None:
        self.records.append(r)
        self.__last[r.series] = r.virtual_time

    def query(self, metric: Optional[str] = None, **tags: object) -> List[ResultRecord]:
        wanted = {(k, str(v)) for k, v in tags.items()}
        return [
            r
            for r in self.records
            if (metric is None or r.metric == metric) and wanted <= set(r.tags)
        ]

    def values(self, metric: str, **tags: object) -> List[float]:
        return [r.value for r in self.query(metric, **tags)]

    def total(self, metric: str, **tags: object) -> float:
        return sum(self.values(metric, **tags))

    def sorted_records(self) -> List[ResultRecord]:
        """Records grouped by series, each series in emission order."""
        return sorted(self.records, key=lambda r: r.series)


def record_result(pool: ResultPool, r: ResultRecord) -> ResultPool:
    """Append **r** to **pool**.

    :raise grid_dsim.exception.ContextError: If **r** belongs to another run.
    :raise grid_dsim.exception.IntegrityError: If **r** goes back in virtual
        time within its series.
    """
    if r.context_id != pool.context_id:
        m = f"Record of context {r.context_id} offered to the pool of {pool.context_id}"
        raise ContextError(m)

    last = pool.last_time(r.series)
    if last is not None and r.virtual_time < last:
        m = (
            f"Record {r.metric} {dict(r.tags)} at {r.virtual_time} is older than "
            f"the previous one of its series at {last}"
        )
        raise IntegrityError(m, virtual_time=r.virtual_time)

    pool.note(r)
    return pool


def records_csv(records: Iterable[ResultRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.csv_row())
    return buffer.getvalue()


def export_results(pool: ResultPool, path: Union[str, Path]) -> Path:
    """Write **pool** to the directory **path** (created if needed)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    text = records_csv(pool.sorted_records())
    manifest = {
        **pool.manifest,
        "context_id": pool.context_id,
        "columns": list(CSV_COLUMNS),
        "records": len(pool),
        "records_hash": f"{fingerprint(text):016x}",
    }
    (out / RECORDS_FILE).write_text(text, encoding="utf-8")
    (out / MANIFEST_FILE).write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    logger.info(f"Exported {len(pool)} records to {out}")
    return out


def import_results(path: Union[str, Path]) -> ResultPool:
    """Read an exported run back into a pool.

    :raise grid_dsim.exception.IntegrityError: On a missing, truncated or
        altered file.
    """
    src = Path(path)
    try:
        manifest = json.loads((src / MANIFEST_FILE).read_text(encoding="utf-8"))
        text = (src / RECORDS_FILE).read_text(encoding="utf-8")
    except (OSError, ValueError) as e:
        raise IntegrityError(f"Cannot read results in {src}: {e}")

    if not isinstance(manifest, dict):
        raise IntegrityError(f"{src / MANIFEST_FILE} is not a JSON object")

    expected = manifest.get("records_hash")
    actual = f"{fingerprint(text):016x}"
    if expected != actual:
        raise IntegrityError(f"Records hash mismatch in {src}: {actual} != {expected}")

    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise IntegrityError(f"Unexpected CSV header in {src / RECORDS_FILE}")

    context_id = int(manifest.get("context_id", 0))
    kept = {k: v for k, v in manifest.items() if k not in ("records", "records_hash")}
    pool = ResultPool(context_id, kept)
    for n, row in enumerate(rows[1:], 2):
        try:
            ctx, metric, vt, value, tags = row
            r = ResultRecord(
                int(ctx), metric, int(vt), float(value), make_tags(json.loads(tags))
            )
        except (ValueError, TypeError, AttributeError) as e:
            raise IntegrityError(f"{src / RECORDS_FILE}:{n}: {e}")
        record_result(pool, r)

    if len(pool) != manifest.get("records"):
        m = f"{src} holds {len(pool)} records, manifest says {manifest.get('records')}"
        raise IntegrityError(m)

    return pool


def initial_contents(pool: ResultPool) -> Dict[str, List[Json]]:
    """Final database placements of a run, per center, to seed another run."""
    contents: Dict[str, List[Json]] = {}
    for r in pool.query("db_object"):
        center, obj = r.tag("center"), r.tag("object")
        if center is None or obj is None:
            continue
        # Objects left on mass storage are not database contents
        if r.tag("location") not in (None, f"{center}.db"):
            continue
        contents.setdefault(center, []).append({"object": obj, "size": int(r.value)})

    return {
        c: sorted(v, key=lambda o: o["object"]) for c, v in sorted(contents.items())
    }


def load_initial_contents(path: Path) -> Dict[str, List[Json]]:
    return initial_contents(import_results(path))
