"""The ``grid-dsim`` command line."""

import argparse
import signal
import threading
from typing import Dict, List, Optional, Sequence

from rich.console import Console
from rich.table import Table

from .agent import AgentConfig, SimulationAgent
from .client import print_summary, run_scenario
from .exception import EXIT_OK, EXIT_VALIDATION, GridSimError, ScenarioValidationError
from .metrics import ReplayMetrics
from .placement import DEFAULT_WEIGHTS, performance_value
from .registry import DEFAULT_TTL, RegistryServer
from .results import export_results, import_results
from .scenario import parse_scenario
from .typings import AgentId
from .utils import logger

console = Console(stderr=True)


def parse_agents(text: str) -> Dict[AgentId, str]:
    """Parse ``1=host:port,2=host:port``."""
    agents: Dict[AgentId, str] = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        aid, sep, address = item.partition("=")
        if not sep or not aid.strip().isdigit() or not address:
            m = f"Invalid agent {item!r}, use id=host:port"
            raise argparse.ArgumentTypeError(m)
        agents[int(aid)] = address.strip()

    if not agents:
        raise argparse.ArgumentTypeError("Empty agent list")
    return agents


def parse_weights(text: str) -> tuple:
    try:
        weights = tuple(float(w) for w in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))
    if len(weights) != 4:
        raise argparse.ArgumentTypeError("Four comma-separated weights expected")
    return weights


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grid-dsim",
        description="Distributed discrete-event simulation of Grid systems",
    )
    parser.add_argument("--log-level", default="INFO", help="Log level (default: INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a scenario")
    run.add_argument("scenario", help="Scenario JSON file")
    where = run.add_mutually_exclusive_group()
    where.add_argument("--local", type=int, help="Run on N in-process agents")
    where.add_argument(
        "--agents", type=parse_agents, help="Deployed agents: id=host:port,..."
    )
    where.add_argument("--registry", help="Registry URL to discover agents from")
    run.add_argument("--out", help="Directory to export the results to")
    run.add_argument(
        "--progress",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Show the progress line",
    )
    run.add_argument(
        "--deadlock-timeout",
        type=float,
        default=None,
        help="Seconds without progress before a local run is declared deadlocked",
    )

    validate = commands.add_parser("validate", help="Validate a scenario")
    validate.add_argument("scenario", help="Scenario JSON file")

    export = commands.add_parser("export", help="Check and re-export results")
    export.add_argument("source", help="Exported results directory")
    export.add_argument("target", help="Directory to write to")

    replay = commands.add_parser(
        "replay-metrics", help="Show the performance values of a metrics file"
    )
    replay.add_argument("file", help="JSON-lines file of metrics samples")
    replay.add_argument(
        "--weights",
        type=parse_weights,
        default=DEFAULT_WEIGHTS,
        help="cpu,memory,lps,network weights",
    )

    agent = commands.add_parser("agent", help="Run a simulation agent")
    agent.add_argument("--id", type=int, required=True, dest="agent_id")
    agent.add_argument("--listen", default=None, help="host:port to listen on")
    agent.add_argument("--registry", default=None, help="Registry URL")
    agent.add_argument("--peers-file", default=None, help="Static peer file")
    agent.add_argument("--metrics", default=None, help="synthetic, host or replay:FILE")

    registry = commands.add_parser("registry", help="Run the agent registry")
    registry.add_argument("--listen", default="127.0.0.1:7070")
    registry.add_argument("--ttl", type=float, default=DEFAULT_TTL)

    return parser


def wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


############
# Commands #
############


def cmd_run(args: argparse.Namespace) -> int:
    config = parse_scenario(args.scenario)
    agent_config = None
    if args.deadlock_timeout is not None:
        agent_config = AgentConfig(deadlock_timeout=args.deadlock_timeout)

    result = run_scenario(
        config,
        local=args.local,
        agents=args.agents,
        registry=args.registry,
        agent_config=agent_config,
        out=args.out,
        progress=args.progress,
        logging_lvl=args.log_level,
    )
    print_summary(result, console)
    return result.exit_code


def cmd_validate(args: argparse.Namespace) -> int:
    config = parse_scenario(args.scenario)
    console.print(
        f"[green]{config.name}[/green]: {len(config.processes)} processes, "
        f"horizon {config.horizon}, lookahead {config.lookahead}, "
        f"hash {config.scenario_hash()}"
    )
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    pool = import_results(args.source)
    export_results(pool, args.target)
    return EXIT_OK


def cmd_replay_metrics(args: argparse.Namespace) -> int:
    source = ReplayMetrics(args.file)
    table = Table("#", "cpu", "memory", "lps", "network", "value")
    for n in range(len(source.samples)):
        s = source.sample()
        v = performance_value(s, args.weights)
        table.add_row(
            str(n),
            f"{s.cpu_load_norm:.3f}",
            f"{s.mem_used_frac:.3f}",
            f"{s.lp_count}/{s.lp_capacity}",
            f"{s.net_load_norm:.3f}",
            f"{v.value:.4f}",
        )

    Console().print(table)
    return EXIT_OK


def cmd_agent(args: argparse.Namespace) -> int:
    config = AgentConfig.from_env()
    overrides = {
        "listen": args.listen,
        "registry": args.registry,
        "peers_file": args.peers_file,
        "metrics": args.metrics,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(config, k, v)

    agent = SimulationAgent(args.agent_id, config=config, logging_lvl=args.log_level)
    agent.start()
    try:
        wait_for_signal()
    finally:
        agent.stop()
    return EXIT_OK


def cmd_registry(args: argparse.Namespace) -> int:
    server = RegistryServer(args.listen, args.ttl, logging_lvl=args.log_level)
    server.start()
    try:
        wait_for_signal()
    finally:
        server.stop()
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "validate": cmd_validate,
    "export": cmd_export,
    "replay-metrics": cmd_replay_metrics,
    "agent": cmd_agent,
    "registry": cmd_registry,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger.setLevel(args.log_level)

    try:
        return COMMANDS[args.command](args)
    except ScenarioValidationError as e:
        errors: List[str] = e.errors
        console.print(f"[red]Invalid scenario ({len(errors)} errors):[/red]")
        for error in errors:
            console.print(f"  - {error}")
        return EXIT_VALIDATION
    except GridSimError as e:
        console.print(f"[red]{type(e).__name__}:[/red] {e}")
        return e.exit_code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
