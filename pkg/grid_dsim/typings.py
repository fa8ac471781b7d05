__all__ = [
    "Json",
    "AgentId",
    "LpId",
    "ContextId",
    "Ticks",
    "ComponentId",
    "Tags",
    "RouteTable",
]

from typing import Any, Dict, Tuple

Json = Dict[str, Any]

AgentId = int
LpId = int
ContextId = int

# Virtual time in microseconds of simulated time
Ticks = int

ComponentId = str
Tags = Tuple[Tuple[str, str], ...]

RouteTable = Dict[LpId, AgentId]
