from typing import List, Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORT = 3
EXIT_DEADLOCK = 4


class GridSimError(Exception):
    """Base class of every error raised by grid-dsim.

    :param message: Human readable description.
    :type message: str
    :param agent: The agent on which the error originated, if known.
    :type agent: int | None
    :param virtual_time: The virtual time at which the error originated, if known.
    :type virtual_time: int | None
    """

    exit_code = EXIT_ABORT

    def __init__(
        self,
        message: str,
        agent: Optional[int] = None,
        virtual_time: Optional[int] = None,
    ) -> None:
        self.message = message
        self.agent = agent
        self.virtual_time = virtual_time
        super().__init__(self.__str__())

    def __str__(self) -> str:
        where = []
        if self.agent is not None:
            where.append(f"agent={self.agent}")
        if self.virtual_time is not None:
            where.append(f"t={self.virtual_time}")

        return f"{self.message} ({', '.join(where)})" if where else self.message


class ConfigError(GridSimError):
    exit_code = EXIT_VALIDATION


class ScenarioValidationError(ConfigError):
    """Raised with every validation problem found in a scenario, not just the first."""

    def __init__(self, errors: List[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class StateMachineError(GridSimError):
    pass


class ProtocolError(GridSimError):
    pass


class DuplicateEventError(ProtocolError):
    pass


class RoutingError(GridSimError):
    pass


class CausalityError(GridSimError):
    pass


class PlacementError(GridSimError):
    pass


class ModelError(GridSimError):
    pass


class StorageError(ModelError):
    pass


class CodecError(GridSimError):
    pass


class RegistryError(GridSimError):
    pass


class ContextError(GridSimError):
    pass


class IntegrityError(GridSimError):
    pass


class RunAbortedError(GridSimError):
    pass


class DeadlockError(GridSimError):
    exit_code = EXIT_DEADLOCK
