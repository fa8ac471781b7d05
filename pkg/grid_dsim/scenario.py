"""Scenario files: parsing, validation and the built-in templates.

A scenario is a JSON object. Regional centers, links and the job list are
expanded into logical processes here, so the result handed to the agents is a
flat list of processes (``{"id", "kind", "params"}``) that is itself a valid
scenario.
"""

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from .components import JobKind, LinkKind, t0_t1_topology
from .exception import ConfigError, GridSimError, ScenarioValidationError
from .metrics import sample_from_json
from .models import PROCESS_KINDS
from .placement import DEFAULT_WEIGHTS, PerfSample, Weights, check_weights
from .results import load_initial_contents
from .typings import AgentId, Json, LpId, Ticks
from .utils import TICKS_PER_SECOND, canonical_json, fingerprint, to_ticks

PLACEMENTS = ("round_robin", "scheduler", "pinned")
METRICS_MODES = ("synthetic", "live")

# Process parameters holding virtual-time values
TIME_PARAMS = ("delay", "gap", "work", "jitter")


@dataclass(frozen=True)
class ProcessSpec:
    lp_id: LpId
    kind: str
    params: Json = field(default_factory=dict)
    agent: Optional[AgentId] = None

    def to_json(self) -> Json:
        doc: Json = {"id": self.lp_id, "kind": self.kind, "params": self.params}
        if self.agent is not None:
            doc["agent"] = self.agent
        return doc


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    horizon: Ticks
    lookahead: Ticks
    processes: List[ProcessSpec]
    local: Optional[int] = 1
    agents: Dict[AgentId, str] = field(default_factory=dict)
    placement: str = "round_robin"
    trace: bool = False
    metrics_mode: str = "synthetic"
    samples: Dict[AgentId, PerfSample] = field(default_factory=dict)
    weights: Weights = DEFAULT_WEIGHTS

    @property
    def lp_ids(self) -> List[LpId]:
        return [p.lp_id for p in self.processes]

    def process(self, lp_id: LpId) -> ProcessSpec:
        for p in self.processes:
            if p.lp_id == lp_id:
                return p
        raise KeyError(lp_id)

    def to_json(self) -> Json:
        """The resolved scenario, without deployment (participants, pins)."""
        return {
            "name": self.name,
            "seed": self.seed,
            "horizon": self.horizon,
            "lookahead": self.lookahead,
            "trace": self.trace,
            "metrics": {
                "mode": self.metrics_mode,
                "weights": list(self.weights),
                "samples": {
                    str(a): sample_to_json(s) for a, s in sorted(self.samples.items())
                },
            },
            "processes": [
                {"id": p.lp_id, "kind": p.kind, "params": p.params}
                for p in self.processes
            ],
        }

    def scenario_hash(self) -> str:
        return f"{fingerprint(canonical_json(self.to_json())):016x}"


def optional_agent(value: Any) -> Optional[AgentId]:
    return None if value is None else int(value)


def sample_to_json(s: PerfSample) -> Json:
    return {
        "cpu_load_norm": s.cpu_load_norm,
        "mem_used_frac": s.mem_used_frac,
        "net_load_norm": s.net_load_norm,
        "lp_count": s.lp_count,
        "lp_capacity": s.lp_capacity,
        "components_cached": sorted(s.components_cached),
    }


#############
# Templates #
#############


def ping_pong_template(
    delay: int = 1, lookahead: int = 1, horizon: int = 10_000, serve_both: bool = False
) -> Json:
    return {
        "name": "ping_pong",
        "horizon": horizon,
        "lookahead": lookahead,
        "participants": "local:2",
        "processes": [
            {
                "id": 1,
                "kind": "ping_pong",
                "params": {"peer": 2, "delay": delay, "serve": True},
            },
            {
                "id": 2,
                "kind": "ping_pong",
                "params": {"peer": 1, "delay": delay, "serve": serve_both},
            },
        ],
    }


def symmetric_cycle_template(lookahead: int = 0, horizon: int = 1_000) -> Json:
    """Two processes feeding each other with zero slack: never safe without
    lookahead."""
    doc = ping_pong_template(1, lookahead, horizon, serve_both=True)
    doc["name"] = "symmetric_cycle"
    return doc


def star_template(
    consumers: int = 4, gap: int = 10, jitter: int = 5, horizon: int = 50_000
) -> Json:
    ids = list(range(2, consumers + 2))
    params = {"consumers": ids, "gap": gap, "jitter": jitter}
    processes = [{"id": 1, "kind": "star_producer", "params": params}]
    processes += [{"id": i, "kind": "star_consumer", "params": {}} for i in ids]
    return {
        "name": "star",
        "horizon": horizon,
        "lookahead": min(gap, 5),
        "participants": "local:3",
        "processes": processes,
    }


def always_safe_template(
    tickers: int = 3, gap: int = 7, horizon: int = 10_000, agents: int = 1
) -> Json:
    """Independent tickers pinned round-robin to **agents** agents.

    On one agent nothing ever waits on a remote bound. Spread over several, the
    lookahead spans the whole run, so the first guarantee from each peer makes
    every later event safe.
    """
    processes = [
        {
            "id": i,
            "kind": "ticker",
            "agent": (i - 1) % agents + 1,
            "params": {"gap": gap + i},
        }
        for i in range(1, tickers + 1)
    ]
    return {
        "name": "always_safe",
        "horizon": horizon,
        "lookahead": 1 if agents == 1 else horizon,
        "participants": f"local:{max(agents, 2)}",
        "placement": "pinned",
        "processes": processes,
    }


def t0_t1_template(
    scale: float = 1.0, n_t1: int = 2, transfers: int = 5, then_demand: int = 10
) -> Json:
    """A T0 center streaming datasets to T1 centers over WAN links.

    Transfers on a link start one second apart. At **scale** 1 a transfer
    alone takes 1.2 s, so consecutive transfers overlap and interrupt each
    other; at scale 2 and above they no longer overlap.
    """
    gap = TICKS_PER_SECOND
    base_bandwidth = 1_000_000_000
    centers, links = t0_t1_topology(
        n_t1=n_t1, wan_bandwidth=int(base_bandwidth * scale), cpus=transfers
    )
    bits = int(1.2 * base_bandwidth)
    lookahead = 50_000

    jobs = []
    for link, dst in zip(links, centers[1:]):
        for k in range(transfers):
            jobs.append(
                {
                    "id": f"{link.link_id}/{k}",
                    "kind": "TRANSFER",
                    "time": lookahead + k * gap,
                    "chain": [link.link_id],
                    "bits": bits,
                    "to": dst.name,
                    "dataset": f"{dst.name}.ds{k}",
                    "then_demand": then_demand,
                }
            )

    return {
        "name": f"t0_t1_x{scale}",
        "horizon": (3 * transfers + 5) * gap,
        "lookahead": lookahead,
        "participants": "local:3",
        "centers": [
            {
                "name": c.name,
                "cpus": c.cpus,
                "cpu_power": c.cpu_power,
                "lan_bandwidth": c.lan_bandwidth,
                "db_capacity": c.db_capacity,
                "mass": [{"capacity": m.capacity} for m in c.mass],
            }
            for c in centers
        ],
        "links": [
            {"id": link.link_id, "bandwidth": link.bandwidth, "kind": link.kind.value}
            for link in links
        ],
        "workload": {"jobs": jobs},
    }


def dynamic_jobs_template(
    spawners: int = 2, jobs: int = 5, gap: int = 20, work: int = 15
) -> Json:
    processes = [
        {"id": i, "kind": "spawner", "params": {"jobs": jobs, "gap": gap, "work": work}}
        for i in range(1, spawners + 1)
    ]
    return {
        "name": "dynamic_jobs",
        "horizon": (jobs + 2) * gap + work * 2,
        "lookahead": 1,
        "participants": "local:2",
        "placement": "round_robin",
        "processes": processes,
    }


TEMPLATES: Dict[str, Callable[..., Json]] = {
    "ping_pong": ping_pong_template,
    "star": star_template,
    "t0_t1": t0_t1_template,
    "always_safe": always_safe_template,
    "symmetric_cycle": symmetric_cycle_template,
    "dynamic_jobs": dynamic_jobs_template,
}


def expand_template(doc: Json) -> Json:
    """Replace ``{"template": name, "params": {...}}`` with the generated
    scenario; other top-level fields of **doc** override the generated ones."""
    name = doc["template"]
    if name not in TEMPLATES:
        raise ScenarioValidationError([f"Unknown template '{name}'"])

    try:
        generated = TEMPLATES[name](**doc.get("params", {}))
    except TypeError as e:
        raise ScenarioValidationError([f"Invalid parameters for template {name}: {e}"])

    overrides = {k: v for k, v in doc.items() if k not in ("template", "params")}
    return {**generated, **overrides}


###########
# Parsing #
###########


class _Parser:
    """Collects every validation problem before giving up."""

    def __init__(self, doc: Json, base: Path) -> None:
        self.doc = doc
        self.base = base
        self.errors: List[str] = []
        self.processes: List[ProcessSpec] = []
        self.next_id = 1

    def error(self, message: str) -> None:
        self.errors.append(message)

    def ticks(self, value: Any, what: str, default: Optional[int] = None) -> int:
        if value is None:
            if default is None:
                self.error(f"{what} is required")
                return 0
            return default
        try:
            return to_ticks(value)
        except ConfigError as e:
            self.error(f"{what}: {e.message}")
            return 0

    def allocate(self) -> LpId:
        lp = self.next_id
        self.next_id += 1
        return lp

    ##########
    # Fields #
    ##########

    def seed(self) -> int:
        seed = self.doc.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            self.error(f"seed must be an unsigned 64-bit integer, got {seed!r}")
            return 0
        return seed

    def participants(self) -> Tuple[Optional[int], Dict[AgentId, str]]:
        value = self.doc.get("participants", "local:1")
        if isinstance(value, str) and value.startswith("local:"):
            n = value.split(":", 1)[1]
            if not n.isdigit() or int(n) < 1:
                self.error(f"Invalid participants '{value}'")
                return 1, {}
            return int(n), {}

        if isinstance(value, list):
            agents: Dict[AgentId, str] = {}
            for entry in value:
                try:
                    agents[int(entry["agent_id"])] = str(entry["address"])
                except (KeyError, TypeError, ValueError):
                    self.error(f"Invalid participant entry {entry!r}")
            if not agents:
                self.error("participants list is empty")
            return None, agents

        self.error(f"Invalid participants {value!r}")
        return 1, {}

    def metrics(self) -> Tuple[str, Dict[AgentId, PerfSample], Weights]:
        doc = self.doc.get("metrics", {})
        mode = doc.get("mode", "synthetic")
        if mode not in METRICS_MODES:
            self.error(f"Unknown metrics mode '{mode}'")

        weights = DEFAULT_WEIGHTS
        try:
            weights = check_weights(doc.get("weights", DEFAULT_WEIGHTS))
        except (ConfigError, TypeError) as e:
            self.error(str(e))

        samples: Dict[AgentId, PerfSample] = {}
        for agent, sample in doc.get("samples", {}).items():
            try:
                samples[int(agent)] = sample_from_json(sample)
            except (GridSimError, TypeError, ValueError) as e:
                self.error(f"Invalid metrics sample for agent {agent}: {e}")

        return mode, samples, weights

    #############
    # Processes #
    #############

    def explicit_processes(self, lookahead: Ticks) -> None:
        seen = set()
        for p in self.doc.get("processes", []):
            lp_id = p.get("id")
            if isinstance(lp_id, bool) or not isinstance(lp_id, int) or lp_id < 1:
                self.error(f"Invalid process id {lp_id!r}")
                continue
            if lp_id in seen:
                self.error(f"Duplicate process id {lp_id}")
                continue
            seen.add(lp_id)

            kind = p.get("kind")
            if kind not in PROCESS_KINDS:
                self.error(f"Process {lp_id}: unknown kind '{kind}'")

            params = dict(p.get("params", {}))
            for key in TIME_PARAMS:
                if key in params:
                    params[key] = self.ticks(params[key], f"process {lp_id} {key}")

            if kind == "ping_pong" and params.get("delay", 0) < lookahead:
                self.error(
                    f"Process {lp_id}: delay {params.get('delay')} is below "
                    f"the lookahead {lookahead}"
                )
            if kind == "star_producer" and params.get("gap", 0) < lookahead:
                self.error(f"Process {lp_id}: gap is below the lookahead {lookahead}")

            agent = p.get("agent")
            self.processes.append(
                ProcessSpec(lp_id, str(kind), params, optional_agent(agent))
            )

        self.next_id = max(seen, default=0) + 1

    def resources(
        self, initial: Dict[str, List[Json]]
    ) -> Tuple[Dict[str, LpId], Dict[str, List[str]], Optional[LpId]]:
        """Expand centers and links into processes.

        :return: Center name to LP, center name to cpu ids, network LP.
        """
        centers: Dict[str, LpId] = {}
        cpus: Dict[str, List[str]] = {}
        owner: Dict[str, LpId] = {}

        for c in self.doc.get("centers", []):
            name = c.get("name")
            if not isinstance(name, str) or not name:
                self.error(f"Center without a name: {c!r}")
                continue
            if name in centers:
                self.error(f"Duplicate center '{name}'")
                continue

            lp = self.allocate()
            centers[name] = lp
            cpus[name] = [f"{name}.cpu{i}" for i in range(int(c.get("cpus", 1)))]
            for cid in cpus[name] + [f"{name}.lan", f"{name}.db"]:
                owner[cid] = lp
            for i in range(len(c.get("mass", []))):
                owner[f"{name}.mss{i}"] = lp

            center = {k: v for k, v in c.items() if k != "agent"}
            center["mass"] = [dict(m) for m in c.get("mass", [])]
            for m in center["mass"]:
                if "mount_latency" in m:
                    m["mount_latency"] = self.ticks(m["mount_latency"], f"{name} mount")
            params: Json = {"center": center, "initial": initial.get(name, [])}
            agent = c.get("agent")
            self.processes.append(
                ProcessSpec(lp, "center", params, optional_agent(agent))
            )

        unknown_initial = sorted(set(initial) - set(centers))
        for name in unknown_initial:
            self.error(f"initial_contents names unknown center '{name}'")

        links = []
        seen = set()
        for link in self.doc.get("links", []):
            lid = link.get("id")
            if lid in seen:
                self.error(f"Duplicate link '{lid}'")
                continue
            seen.add(lid)
            bandwidth = link.get("bandwidth")
            if isinstance(bandwidth, bool) or not isinstance(bandwidth, (int, float)):
                self.error(f"Link {lid}: bandwidth must be a number")
            elif bandwidth <= 0:
                self.error(f"Link {lid}: bandwidth must be positive")
            try:
                LinkKind(link.get("kind", "WAN"))
            except ValueError:
                self.error(f"Link {lid}: unknown kind {link.get('kind')!r}")
            kind = link.get("kind", "WAN")
            links.append({"id": lid, "bandwidth": int(bandwidth or 0), "kind": kind})

        network: Optional[LpId] = None
        if links:
            network = self.allocate()
            for link in links:
                owner[str(link["id"])] = network
            agent = self.doc.get("network_agent")
            self.processes.append(
                ProcessSpec(
                    network,
                    "network",
                    {"links": links},
                    optional_agent(agent),
                )
            )

        self.subscriptions(owner)
        return centers, cpus, network

    def subscriptions(self, owner: Dict[str, LpId]) -> None:
        subs: Dict[LpId, Dict[str, List[LpId]]] = {}
        known = {p.lp_id for p in self.processes}
        for cid, lps in sorted(self.doc.get("subscriptions", {}).items()):
            if cid not in owner:
                self.error(f"Subscription to unknown resource '{cid}'")
                continue
            for lp in lps:
                if lp not in known:
                    self.error(f"Subscription of unknown process {lp} to '{cid}'")
            subs.setdefault(owner[cid], {})[cid] = list(lps)

        for i, p in enumerate(self.processes):
            if p.lp_id in subs:
                params = {**p.params, "subscribers": subs[p.lp_id]}
                self.processes[i] = ProcessSpec(p.lp_id, p.kind, params, p.agent)

    ############
    # Workload #
    ############

    def workload(
        self,
        centers: Dict[str, LpId],
        cpus: Dict[str, List[str]],
        network: Optional[LpId],
        seed: int,
        lookahead: Ticks,
        horizon: Ticks,
    ) -> None:
        doc = self.doc.get("workload", {})
        jobs = list(doc.get("jobs", []))
        if "generator" in doc:
            jobs += generate_jobs(
                doc["generator"], seed, sorted(centers), self.link_ids(), lookahead
            )

        resolved = []
        ids = set()
        for job in jobs:
            r = self.job(job, centers, cpus, network, lookahead, horizon)
            if r is None:
                continue
            if r["id"] in ids:
                self.error(f"Duplicate job id '{r['id']}'")
                continue
            ids.add(r["id"])
            resolved.append(r)

        if resolved:
            lp = self.allocate()
            self.processes.append(ProcessSpec(lp, "workload", {"jobs": resolved}))

    def link_ids(self) -> List[str]:
        return sorted(str(link.get("id")) for link in self.doc.get("links", []))

    def job(
        self,
        job: Json,
        centers: Dict[str, LpId],
        cpus: Dict[str, List[str]],
        network: Optional[LpId],
        lookahead: Ticks,
        horizon: Ticks,
    ) -> Optional[Json]:
        job_id = str(job.get("id", ""))
        if not job_id:
            self.error(f"Job without an id: {job!r}")
            return None

        t = self.ticks(job.get("time"), f"job {job_id} time")
        if t < lookahead:
            self.error(f"Job {job_id}: time {t} is below the lookahead {lookahead}")
        if t >= horizon:
            self.error(f"Job {job_id}: time {t} is not before the horizon {horizon}")

        try:
            kind = JobKind(job.get("kind", "PROCESSING"))
        except ValueError:
            self.error(f"Job {job_id}: unknown kind {job.get('kind')!r}")
            return None

        if kind == JobKind.TRANSFER:
            chain = job.get("chain") or ([job["link"]] if "link" in job else [])
            known = set(self.link_ids())
            missing = [link for link in chain if link not in known]
            for link in missing:
                self.error(f"Job {job_id}: unknown link '{link}'")
            if not chain:
                self.error(f"Job {job_id}: transfer without links")
            bits = int(job.get("bits", int(job.get("size", 0)) * 8))
            if bits <= 0:
                self.error(f"Job {job_id}: transfer of {bits} bits")

            msg: Json = {"op": "transfer", "job": job_id, "bits": bits, "chain": chain}
            to = job.get("to")
            if to is not None:
                if to not in centers:
                    self.error(f"Job {job_id}: unknown center '{to}'")
                else:
                    msg["dst_lp"] = centers[to]
                    msg["arrival"] = {
                        "job": job_id,
                        "dataset": job.get("dataset"),
                        "size": bits // 8,
                        "then_demand": int(job.get("then_demand", 0)),
                    }
            if network is None or missing or not chain:
                return None
            return {
                "id": job_id,
                "time": t,
                "to": network,
                "message": msg,
                "demand": bits,
            }

        center = job.get("center")
        if center not in centers:
            self.error(f"Job {job_id}: unknown center '{center}'")
            return None

        demand = int(job.get("demand", 0))
        if demand <= 0:
            self.error(f"Job {job_id}: demand must be positive")

        if kind == JobKind.ANALYSIS:
            if "dataset" not in job:
                self.error(f"Job {job_id}: analysis without a dataset")
            msg = {
                "op": "analysis",
                "job": job_id,
                "dataset": job.get("dataset"),
                "demand": demand,
            }
        else:
            msg = {"op": "process", "job": job_id, "demand": demand}
            cpu = job.get("cpu")
            if cpu is not None:
                if cpu not in cpus[center]:
                    self.error(f"Job {job_id}: unknown cpu '{cpu}'")
                msg["cpu"] = cpu

        return {
            "id": job_id,
            "time": t,
            "to": centers[center],
            "message": msg,
            "demand": demand,
        }


def generate_jobs(
    doc: Json,
    seed: int,
    centers: List[str],
    links: List[str],
    lookahead: Ticks,
) -> List[Json]:
    """Seeded random job list: PROCESSING jobs on random centers and TRANSFER
    jobs on random links, with uniformly distributed gaps."""
    rng = random.Random(fingerprint(f"{seed}:workload"))
    count = int(doc.get("count", 10))
    interval = to_ticks(doc.get("interval", 100))
    lo, hi = doc.get("demand", [10, 100])
    size_lo, size_hi = doc.get("size", [1_000, 10_000])
    kinds = [k for k in doc.get("kinds", ["PROCESSING", "TRANSFER"])]
    if not centers:
        kinds = [k for k in kinds if k == "TRANSFER"]
    if not links:
        kinds = [k for k in kinds if k != "TRANSFER"]
    if not kinds:
        raise ScenarioValidationError(["Workload generator has nothing to submit to"])

    jobs = []
    t = lookahead
    for i in range(count):
        kind = kinds[rng.randrange(len(kinds))]
        if kind == "TRANSFER":
            jobs.append(
                {
                    "id": f"gen{i}",
                    "kind": kind,
                    "time": t,
                    "chain": [links[rng.randrange(len(links))]],
                    "size": rng.randint(size_lo, size_hi),
                }
            )
        else:
            jobs.append(
                {
                    "id": f"gen{i}",
                    "kind": "PROCESSING",
                    "time": t,
                    "center": centers[rng.randrange(len(centers))],
                    "demand": rng.randint(lo, hi),
                }
            )
        t += rng.randint(0, 2 * interval)

    return jobs


def load_scenario_doc(source: Union[str, Path, Json]) -> Tuple[Json, Path]:
    if isinstance(source, dict):
        return source, Path.cwd()

    path = Path(source)
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ScenarioValidationError([f"Cannot read {path}: {e}"])
    except json.JSONDecodeError as e:
        raise ScenarioValidationError([f"Malformed scenario file {path}: {e}"])

    if not isinstance(doc, dict):
        raise ScenarioValidationError([f"{path} does not hold a JSON object"])

    return doc, path.parent


def parse_scenario(
    source: Union[str, Path, Json],
    initial_loader: Optional[Callable[[Path], Dict[str, List[Json]]]] = None,
) -> ScenarioConfig:
    """Parse and validate a scenario.

    :param source: A path to a JSON file, or an already loaded document.
    :type source: str | pathlib.Path | Dict[str, Any]
    :param initial_loader: Reads the ``initial_contents`` results directory
        into the initial objects of every center.
    :type initial_loader: Callable | None
    :return: The validated scenario.
    :rtype: grid_dsim.scenario.ScenarioConfig
    :raise grid_dsim.exception.ScenarioValidationError: With every problem
        found in the scenario.
    """
    doc, base = load_scenario_doc(source)
    if "template" in doc:
        doc = expand_template(doc)

    p = _Parser(doc, base)
    seed = p.seed()
    horizon = p.ticks(doc.get("horizon"), "horizon")
    if "horizon" in doc and horizon <= 0:
        p.error(f"horizon must be positive, got {doc.get('horizon')!r}")
    lookahead = p.ticks(doc.get("lookahead"), "lookahead", default=1)
    if lookahead < 0:
        p.error(f"lookahead must not be negative, got {lookahead}")

    local, agents = p.participants()
    placement = doc.get("placement", "round_robin")
    if placement not in PLACEMENTS:
        p.error(f"Unknown placement '{placement}'")
    mode, samples, weights = p.metrics()

    initial: Dict[str, List[Json]] = {}
    if doc.get("initial_contents"):
        path = base / str(doc["initial_contents"])
        loader = initial_loader or load_initial_contents
        try:
            initial = loader(path)
        except GridSimError as e:
            p.error(f"initial_contents: {e}")

    p.explicit_processes(lookahead)
    centers, cpus, network = p.resources(initial)
    p.workload(centers, cpus, network, seed, lookahead, max(horizon, 1))

    if not p.processes and not p.errors:
        p.error("Scenario defines no processes")

    if p.errors:
        raise ScenarioValidationError(p.errors)

    return ScenarioConfig(
        name=str(doc.get("name", "scenario")),
        seed=seed,
        horizon=horizon,
        lookahead=lookahead,
        processes=sorted(p.processes, key=lambda s: s.lp_id),
        local=local,
        agents=agents,
        placement=placement,
        trace=bool(doc.get("trace", False)),
        metrics_mode=mode,
        samples=samples,
        weights=weights,
    )
