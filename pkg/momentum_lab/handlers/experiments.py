"""handlers/experiments.py

Simulation and self-check commands.

``simulate det|stoch|asym|drop|sweep`` wrap the trajectory runners in
``services.sim``; ``verify`` runs the check suite and exits 1 on any failure.
A diverged run exits 2 after its output has been written.
"""
from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import Field, NonNegativeInt, PositiveFloat, PositiveInt, field_validator, model_validator

from momentum_lab.handlers.common import (
    CommandRouter,
    ExitCode,
    ProblemConfig,
    RunConfig,
    emit,
    load_problem,
    start_point,
)
from momentum_lab.services.core import InvalidArgumentError, MomentumParams
from momentum_lab.services.dynamics import ConstantSchedule, Regime, Stage, parse_schedule
from momentum_lab.services.sim import (
    NoiseModel,
    run_asymptotic,
    run_constant_and_drop,
    run_deterministic,
    run_stochastic,
    run_sweep,
)
from momentum_lab.services.verify import GROUPS, results_table, run_checks

logger = logging.getLogger(__name__)

router = CommandRouter(name="experiments")


class NoisyRunConfig(ProblemConfig):
    x0: Optional[List[float]] = None
    noise_bound: Optional[PositiveFloat] = None

    def noise(self) -> NoiseModel:
        if self.noise_bound is None:
            return NoiseModel()
        return NoiseModel(kind="truncated", bound=self.noise_bound)


def _thinned(frame: pd.DataFrame, thin: int) -> pd.DataFrame:
    """Каждая `thin`-я строка, нулевой шаг всегда остаётся."""
    return frame.iloc[::thin].reset_index(drop=True)


# ---------------------------------------------------------------------------
# simulate det --------------------------------------------------------------
# ---------------------------------------------------------------------------
class DeterministicConfig(ProblemConfig):
    alpha: PositiveFloat
    beta: float = Field(ge=0.0, lt=1.0)
    nu: float = Field(ge=0.0, le=1.0)
    steps: PositiveInt = 2000
    x0: Optional[List[float]] = None
    thin: PositiveInt = 1


@router.command("simulate det", DeterministicConfig)
def cmd_simulate_det(config: DeterministicConfig) -> int:
    problem = load_problem(config)
    params = MomentumParams(alpha=config.alpha, beta=config.beta, nu=config.nu)
    run = run_deterministic(problem, params, start_point(problem, config.x0), config.steps)
    frame = pd.DataFrame(
        {
            "step": np.arange(len(run.distances)),
            "distance": run.distances,
            "loss": run.losses,
            "grad_norm": run.grad_norms,
        }
    )
    summary = run.model_dump(include={"theoretical_rate", "measured_rate", "rate_note", "diverged", "diverged_at"})
    emit(config, "simulate det", frame=_thinned(frame, config.thin), summary=summary, default_format="csv")
    return ExitCode.UNSTABLE if run.diverged or run.theoretical_rate >= 1 else ExitCode.OK


# ---------------------------------------------------------------------------
# simulate stoch ------------------------------------------------------------
# ---------------------------------------------------------------------------
class StochasticConfig(NoisyRunConfig):
    alpha: Optional[PositiveFloat] = None
    beta: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    nu: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    schedule: Optional[Union[Dict[str, Any], str]] = None
    steps: PositiveInt = 10_000
    burn_in: Optional[NonNegativeInt] = None

    @model_validator(mode="after")
    def _schedule_or_params(self) -> "StochasticConfig":
        given = [v is not None for v in (self.alpha, self.beta, self.nu)]
        if self.schedule is None and not all(given):
            raise ValueError("give --schedule or all of --alpha, --beta, --nu")
        if self.schedule is not None and any(given):
            raise ValueError("--schedule excludes --alpha/--beta/--nu")
        return self

    def build_schedule(self):
        if self.schedule is not None:
            return parse_schedule(self.schedule)
        return ConstantSchedule(params=MomentumParams(alpha=self.alpha, beta=self.beta, nu=self.nu))


@router.command("simulate stoch", StochasticConfig)
def cmd_simulate_stoch(config: StochasticConfig) -> int:
    problem = load_problem(config)
    stats = run_stochastic(
        problem,
        config.build_schedule(),
        start_point(problem, config.x0),
        config.steps,
        burn_in=config.burn_in,
        seed=config.seed,
        noise=config.noise(),
    )
    emit(config, "simulate stoch", payload=stats)
    return ExitCode.UNSTABLE if stats.diverged else ExitCode.OK


# ---------------------------------------------------------------------------
# simulate asym -------------------------------------------------------------
# ---------------------------------------------------------------------------
class AsymptoticConfig(NoisyRunConfig):
    schedule: Union[Dict[str, Any], str]
    regime: Optional[Regime] = None
    steps: PositiveInt = 100_000
    thin: PositiveInt = 100


@router.command("simulate asym", AsymptoticConfig)
def cmd_simulate_asym(config: AsymptoticConfig) -> int:
    problem = load_problem(config)
    run = run_asymptotic(
        problem,
        parse_schedule(config.schedule),
        start_point(problem, config.x0),
        config.steps,
        seed=config.seed,
        noise=config.noise(),
        regime=config.regime,
    )
    curve = run.grad_norm_min_curve
    frame = pd.DataFrame({"step": np.arange(len(curve)), "grad_norm_min": curve})
    summary = {
        "regime": run.regime,
        "conditions_satisfied": run.check.satisfied,
        "violated": run.check.violated,
        "warnings": run.warnings,
        "initial_grad_norm": run.initial_grad_norm,
        "final_grad_norm_min": run.final_grad_norm_min,
        "diverged": run.stats.diverged,
    }
    emit(config, "simulate asym", frame=_thinned(frame, config.thin), summary=summary, default_format="csv")
    return ExitCode.UNSTABLE if run.stats.diverged else ExitCode.OK


# ---------------------------------------------------------------------------
# simulate drop -------------------------------------------------------------
# ---------------------------------------------------------------------------
class DropConfig(NoisyRunConfig):
    stages: Union[str, List[Stage]]
    beta: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    nu: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    rate_probe_steps: PositiveInt = 2000

    def build_stages(self) -> List[Stage]:
        """``"α:steps,..."`` with shared --beta/--nu, or ``"α:β:ν:steps,..."``."""
        if not isinstance(self.stages, str):
            return list(self.stages)
        stages = []
        for item in filter(None, (part.strip() for part in self.stages.split(","))):
            fields = item.split(":")
            if len(fields) == 2 and (self.beta is None or self.nu is None):
                raise InvalidArgumentError(f"stage {item!r} needs --beta and --nu")
            if len(fields) not in (2, 4):
                raise InvalidArgumentError(f"cannot parse stage {item!r}")
            try:
                if len(fields) == 2:
                    alpha, beta, nu, steps = float(fields[0]), self.beta, self.nu, int(fields[1])
                else:
                    alpha, beta, nu, steps = float(fields[0]), float(fields[1]), float(fields[2]), int(fields[3])
            except ValueError as exc:
                raise InvalidArgumentError(f"cannot parse stage {item!r}") from exc
            stages.append(Stage(params=MomentumParams(alpha=alpha, beta=beta, nu=nu), duration=steps))
        if not stages:
            raise InvalidArgumentError("no stages given")
        return stages


@router.command("simulate drop", DropConfig)
def cmd_simulate_drop(config: DropConfig) -> int:
    problem = load_problem(config)
    reports = run_constant_and_drop(
        problem,
        config.build_stages(),
        start_point(problem, config.x0),
        seed=config.seed,
        noise=config.noise(),
        rate_probe_steps=config.rate_probe_steps,
    )
    rows = [
        {
            "stage": r.stage,
            "alpha": r.params.alpha,
            "beta": r.params.beta,
            "nu": r.params.nu,
            "steps": r.steps,
            "mean_loss": r.stats.mean_loss_window,
            "theoretical_rate": r.theoretical_rate,
            "measured_rate": r.measured_rate,
            "diverged": r.stats.diverged,
        }
        for r in reports
    ]
    emit(config, "simulate drop", frame=pd.DataFrame(rows), default_format="csv")
    return ExitCode.UNSTABLE if any(r.stats.diverged for r in reports) else ExitCode.OK


# ---------------------------------------------------------------------------
# simulate sweep ------------------------------------------------------------
# ---------------------------------------------------------------------------
class SweepConfig(NoisyRunConfig):
    grid: str = "30x30x30"
    alpha_range: List[PositiveFloat] = Field(default_factory=lambda: [0.01, 1.5], min_length=2, max_length=2)
    beta_range: List[float] = Field(default_factory=lambda: [0.0, 0.999], min_length=2, max_length=2)
    nu_range: List[float] = Field(default_factory=lambda: [0.0, 1.0], min_length=2, max_length=2)
    steps: PositiveInt = 1000
    burn_in: NonNegativeInt = 0
    start_at_optimum: bool = False

    @field_validator("grid")
    @classmethod
    def _grid_shape(cls, v: str) -> str:
        parts = v.lower().split("x")
        if len(parts) != 3 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise ValueError(f"grid must look like 30x30x30, got {v!r}")
        return v.lower()

    @model_validator(mode="after")
    def _ranges(self) -> "SweepConfig":
        if not 0.0 <= self.beta_range[0] <= self.beta_range[1] < 1.0:
            raise ValueError("beta range must lie in [0, 1)")
        if not 0.0 <= self.nu_range[0] <= self.nu_range[1] <= 1.0:
            raise ValueError("nu range must lie in [0, 1]")
        return self

    def axes(self):
        na, nb, nv = (int(p) for p in self.grid.split("x"))
        return (
            np.linspace(*self.alpha_range, na),
            np.linspace(*self.beta_range, nb),
            np.linspace(*self.nu_range, nv),
        )


@router.command("simulate sweep", SweepConfig)
def cmd_simulate_sweep(config: SweepConfig) -> int:
    problem = load_problem(config)
    alphas, betas, nus = config.axes()
    # None: каждая ячейка стартует из оптимума
    x0 = None if config.start_at_optimum else start_point(problem, config.x0)
    frame = run_sweep(
        problem,
        alphas,
        betas,
        nus,
        steps=config.steps,
        seed=config.seed,
        x0=x0,
        burn_in=config.burn_in,
        workers=config.workers(),
        noise=config.noise(),
    )
    summary = {"cells": len(frame), "stable_cells": int(frame["stable"].sum())}
    emit(config, "simulate sweep", frame=frame, summary=summary, default_format="csv")
    return ExitCode.OK


# ---------------------------------------------------------------------------
# verify --------------------------------------------------------------------
# ---------------------------------------------------------------------------
class VerifyConfig(RunConfig):
    only: Optional[List[str]] = None

    @field_validator("only")
    @classmethod
    def _known_groups(cls, v: Optional[List[str]]) -> Optional[List[str]]:
        if v is None:
            return v
        unknown = sorted(set(v) - set(GROUPS))
        if unknown:
            raise ValueError(f"unknown check group(s) {unknown}; choose from {list(GROUPS)}")
        return v


@router.command("verify", VerifyConfig)
def cmd_verify(config: VerifyConfig) -> int:
    results = run_checks(config.only, seed=config.seed, workers=config.workers())
    failed = sum(not r.passed for r in results)
    # таблицу пишем всегда, код 1 только после вывода
    summary = {"checks": len(results), "failed": failed}
    emit(config, "verify", frame=results_table(results), summary=summary, default_format="csv")
    if failed:
        logger.error("%d of %d checks failed", failed, len(results))
        return ExitCode.CHECK_FAILED
    return ExitCode.OK
