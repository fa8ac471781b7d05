from grid_dsim.agent import AgentConfig, SimulationAgent  # noqa: F401
from grid_dsim.client import Client, LocalCluster, RunResult, run_scenario  # noqa: F401
from grid_dsim.controller import PlacementController  # noqa: F401
from grid_dsim.registry import RegistryServer  # noqa: F401
from grid_dsim.results import export_results, import_results  # noqa: F401
from grid_dsim.scenario import parse_scenario  # noqa: F401
