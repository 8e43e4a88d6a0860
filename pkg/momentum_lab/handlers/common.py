"""handlers/common.py

Plumbing shared by the command handlers:

* ``CommandRouter`` – named registry of ``(config model, handler)`` pairs; the
  CLI looks commands up by name and validates the merged flags/config file
  against the registered model before calling the handler;
* ``RunConfig`` – global fields every command accepts;
* problem loading, worker count and output emission with provenance.
"""
from __future__ import annotations

import logging
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Mapping, NamedTuple, Optional, Type

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt

from momentum_lab.services.core import InvalidArgumentError, QuadraticProblem, benchmark_problem
from momentum_lab.services.export import provenance, write_csv, write_json
from momentum_lab.settings import get_settings

logger = logging.getLogger(__name__)


class ExitCode(IntEnum):
    OK = 0
    CHECK_FAILED = 1
    UNSTABLE = 2
    USAGE = 64


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    seed: NonNegativeInt = 0
    output: Optional[str] = None
    format: Optional[Literal["csv", "json"]] = None
    # does not change output bytes, so it stays out of the provenance header
    threads: Optional[PositiveInt] = None

    def provenance(self, command: str) -> Dict[str, Any]:
        body = self.model_dump(mode="json", exclude={"seed", "output", "threads"}, exclude_none=True)
        return provenance({"command": command, **body}, self.seed)

    def workers(self) -> int:
        return self.threads or get_settings().threads


class ProblemConfig(RunConfig):
    problem: Optional[str] = Field(default=None, description="path to a QuadraticProblem JSON file")


Handler = Callable[[Any], int]


class Command(NamedTuple):
    name: str
    config: Type[RunConfig]
    handler: Handler


class CommandRouter:
    def __init__(self, name: str) -> None:
        self.name = name
        self.commands: Dict[str, Command] = {}

    def command(self, name: str, config: Type[RunConfig]) -> Callable[[Handler], Handler]:
        def register(handler: Handler) -> Handler:
            if name in self.commands:
                raise ValueError(f"command {name!r} registered twice on {self.name}")
            self.commands[name] = Command(name, config, handler)
            return handler

        return register


def collect(*routers: CommandRouter) -> Dict[str, Command]:
    table: Dict[str, Command] = {}
    for router in routers:
        table.update(router.commands)
    return table


# ---------------------------------------------------------------------------
# Helpers -------------------------------------------------------------------
# ---------------------------------------------------------------------------
def load_problem(config: ProblemConfig) -> QuadraticProblem:
    """Problem from ``--problem`` or the seeded 2-D benchmark."""
    if config.problem is None:
        return benchmark_problem(config.seed)
    path = Path(config.problem)
    if not path.is_file():
        raise InvalidArgumentError(f"problem file not found: {path}")
    problem = QuadraticProblem.from_json(path.read_text(encoding="utf-8"))
    logger.info("Loaded %d-dimensional problem from %s", problem.dim, path)
    return problem


def start_point(problem: QuadraticProblem, x0: Optional[List[float]]) -> np.ndarray:
    if x0 is None:
        return np.asarray(problem.optimum) + 1.0
    if len(x0) != problem.dim:
        raise InvalidArgumentError(f"x0 has {len(x0)} entries, problem has dimension {problem.dim}")
    return np.asarray(x0, dtype=np.float64)


def emit(
    config: RunConfig,
    command: str,
    *,
    frame: Optional[pd.DataFrame] = None,
    payload: Any = None,
    summary: Optional[Mapping[str, Any]] = None,
    default_format: Literal["csv", "json"] = "json",
) -> None:
    """Write ``frame`` (CSV) or ``payload`` (JSON) with the provenance header.

    ``summary`` entries join the CSV header; in JSON they are merged into the
    result next to the table rows.
    """
    meta = config.provenance(command)
    fmt = config.format or default_format
    if fmt == "csv":
        if frame is None:
            frame = pd.DataFrame([payload.model_dump() if isinstance(payload, BaseModel) else payload])
        write_csv(frame, {**meta, **(summary or {})}, config.output)
        return
    if payload is None:
        payload = {"rows": frame.to_dict(orient="records") if frame is not None else []}
    if summary:
        payload = {**summary, **(payload.model_dump() if isinstance(payload, BaseModel) else payload)}
    write_json(payload, meta, config.output)
