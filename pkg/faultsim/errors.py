from __future__ import annotations

from typing import Any


class FaultSimError(Exception):
    """Base error. `exit_code` is what the CLI returns when it escapes a run."""

    exit_code: int = 1

    def __init__(self, detail: str | dict[str, Any]) -> None:
        self.detail = detail
        super().__init__(detail if isinstance(detail, str) else detail.get("message", str(detail)))


class ConfigurationError(FaultSimError):
    exit_code = 2


class FaultPlanError(ConfigurationError):
    pass


class UsageError(FaultSimError):
    pass


class SimulationDeadlock(UsageError):
    pass


class RankFailure(FaultSimError):
    def __init__(self, ranks: list[int] | tuple[int, ...], *, operation: str) -> None:
        self.ranks = tuple(sorted(ranks))
        self.operation = operation
        super().__init__(
            {
                "message": f"{operation} aborted: rank(s) {list(self.ranks)} failed",
                "ranks": list(self.ranks),
            },
        )


class UnrecoverableFailure(FaultSimError):
    exit_code = 3


class PersistentCorruption(FaultSimError):
    exit_code = 3


class Diverged(FaultSimError):
    def __init__(self, message: str, *, history: list[float]) -> None:
        self.history = list(history)
        super().__init__(message)
