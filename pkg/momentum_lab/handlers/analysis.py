"""handlers/analysis.py

Closed-form analysis commands.

* ``rate`` – spectrum-wide convergence rate of constant (α, β, ν);
  exit 2 when the parameters diverge;
* ``stability`` – largest stable α and, on request, the heavy-ball
  no-trade-off interval;
* ``optimal`` – best (α, β) for a ν, ν-sweeps, best ν for a β, β-sweeps
  and the ν-monotonicity check;
* ``stationary`` – exact stationary covariance and its small-α predictions,
  the error map over (β, ν) grids, and the best ν for a fixed (α, β).
"""
from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import Field, PositiveFloat, PositiveInt, model_validator

from momentum_lab.handlers.common import CommandRouter, ExitCode, ProblemConfig, RunConfig, emit, load_problem
from momentum_lab.services.core import MomentumParams, Spectrum, parallel_map
from momentum_lab.services.export import records_frame
from momentum_lab.services.rate import (
    BETA_MAX,
    global_rate,
    optimal_nu_for_beta,
    optimal_params,
    shb_no_tradeoff_interval,
    stability_max_alpha,
    verify_nu_monotonicity,
)
from momentum_lab.services.stationary import (
    analyze_stationary,
    approx_error_map,
    error_cell,
    optimal_nu_exact,
)

logger = logging.getLogger(__name__)

router = CommandRouter(name="analysis")

ERROR_MAP_COLUMNS = ["alpha", "beta", "nu", "tr_exact", "tr_pred1", "tr_pred2", "rel_err", "stable"]


# ---------------------------------------------------------------------------
# rate ----------------------------------------------------------------------
# ---------------------------------------------------------------------------
class RateConfig(RunConfig):
    alpha: PositiveFloat
    beta: float = Field(ge=0.0, lt=1.0)
    nu: float = Field(ge=0.0, le=1.0)
    mu: PositiveFloat = 1.0
    ell: PositiveFloat = Field(alias="L")


@router.command("rate", RateConfig)
def cmd_rate(config: RateConfig) -> int:
    params = MomentumParams(alpha=config.alpha, beta=config.beta, nu=config.nu)
    report = global_rate(params, Spectrum(mu=config.mu, ell=config.ell))
    emit(config, "rate", payload=report)
    return ExitCode.OK if report.stable else ExitCode.UNSTABLE


# ---------------------------------------------------------------------------
# stability -----------------------------------------------------------------
# ---------------------------------------------------------------------------
class StabilityConfig(RunConfig):
    beta: float = Field(ge=0.0, lt=1.0)
    nu: float = Field(ge=0.0, le=1.0)
    ell: PositiveFloat = Field(alias="L")
    mu: Optional[PositiveFloat] = None
    no_tradeoff: bool = False

    @model_validator(mode="after")
    def _mu_for_interval(self) -> "StabilityConfig":
        if self.no_tradeoff and self.mu is None:
            raise ValueError("--no-tradeoff needs --mu")
        return self


@router.command("stability", StabilityConfig)
def cmd_stability(config: StabilityConfig) -> int:
    result = {"alpha_max": stability_max_alpha(config.beta, config.nu, config.ell)}
    if config.no_tradeoff:
        interval = shb_no_tradeoff_interval(config.beta, Spectrum(mu=config.mu, ell=config.ell))
        result["no_tradeoff"] = list(interval) if interval else None
    emit(config, "stability", payload=result)
    return ExitCode.OK


# ---------------------------------------------------------------------------
# optimal -------------------------------------------------------------------
# ---------------------------------------------------------------------------
class OptimalConfig(RunConfig):
    kappa: float = Field(ge=1.0)
    mu: PositiveFloat = 1.0
    nu: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    beta: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    sweep_nu: Optional[PositiveInt] = None
    sweep_beta: Optional[PositiveInt] = None
    check_monotonicity: Optional[List[float]] = None
    beta_grid: PositiveInt = 1000
    nu_grid: PositiveInt = 101

    @model_validator(mode="after")
    def _one_mode(self) -> "OptimalConfig":
        modes = [self.nu, self.beta, self.sweep_nu, self.sweep_beta, self.check_monotonicity]
        if sum(m is not None for m in modes) != 1:
            raise ValueError("give exactly one of --nu, --beta, --sweep-nu, --sweep-beta, --check-monotonicity")
        return self


def _optimum_row(task: Tuple[float, float, float, int]) -> dict:
    nu, kappa, mu, grid = task
    return optimal_params(nu, kappa, grid, mu=mu).model_dump()


def _best_nu_row(task: Tuple[float, float, float, int]) -> dict:
    beta, kappa, mu, grid = task
    return optimal_nu_for_beta(beta, Spectrum.from_kappa(kappa, mu), grid).model_dump()


@router.command("optimal", OptimalConfig)
def cmd_optimal(config: OptimalConfig) -> int:
    if config.nu is not None:
        emit(config, "optimal", payload=optimal_params(config.nu, config.kappa, config.beta_grid, mu=config.mu))
        return ExitCode.OK

    if config.beta is not None:
        spectrum = Spectrum.from_kappa(config.kappa, config.mu)
        emit(config, "optimal", payload=optimal_nu_for_beta(config.beta, spectrum, config.nu_grid))
        return ExitCode.OK

    if config.sweep_nu is not None:
        nus = np.linspace(0.0, 1.0, config.sweep_nu)
        tasks = [(float(nu), config.kappa, config.mu, config.beta_grid) for nu in nus]
        logger.info("Optimal (alpha, beta) for %d nu values at kappa=%g", len(tasks), config.kappa)
        frame = pd.DataFrame(parallel_map(_optimum_row, tasks, config.workers()))
        emit(config, "optimal", frame=frame[["nu", "alpha", "beta", "rate"]], default_format="csv")
        return ExitCode.OK

    if config.sweep_beta is not None:
        betas = np.linspace(0.0, BETA_MAX, config.sweep_beta)
        tasks = [(float(beta), config.kappa, config.mu, config.nu_grid) for beta in betas]
        logger.info("Optimal nu for %d beta values at kappa=%g", len(tasks), config.kappa)
        frame = pd.DataFrame(parallel_map(_best_nu_row, tasks, config.workers()))
        emit(config, "optimal", frame=frame[["beta", "nu", "alpha", "rate"]], default_format="csv")
        return ExitCode.OK

    report = verify_nu_monotonicity(
        config.check_monotonicity, config.nu_grid, beta_grid_size=config.beta_grid, workers=config.workers()
    )
    rows = [
        {"kappa": kappa, "nu": nu, "rate": r}
        for kappa, rates in zip(report.kappas, report.rates)
        for nu, r in zip(report.nu_grid, rates)
    ]
    summary = {"passed": report.passed, "worst_violation": report.worst_violation}
    emit(config, "optimal", frame=pd.DataFrame(rows), summary=summary, default_format="csv")
    return ExitCode.OK if report.passed else ExitCode.CHECK_FAILED


# ---------------------------------------------------------------------------
# stationary ----------------------------------------------------------------
# ---------------------------------------------------------------------------
class StationaryConfig(ProblemConfig):
    alpha: Optional[PositiveFloat] = None
    beta: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    nu: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    error_map: bool = False
    optimal_nu: bool = False
    alphas: List[PositiveFloat] = Field(default_factory=lambda: [0.05, 0.1, 0.2], min_length=1)
    beta_grid: PositiveInt = 20
    nu_grid: PositiveInt = 20
    nu_candidates: PositiveInt = 101
    threshold: PositiveFloat = 0.2

    @model_validator(mode="after")
    def _needs_params(self) -> "StationaryConfig":
        if self.error_map and self.optimal_nu:
            raise ValueError("--error-map and --optimal-nu are exclusive")
        if self.error_map:
            return self
        if self.alpha is None or self.beta is None:
            raise ValueError("--alpha and --beta are required")
        if not self.optimal_nu and self.nu is None:
            raise ValueError("--nu is required")
        return self


@router.command("stationary", StationaryConfig)
def cmd_stationary(config: StationaryConfig) -> int:
    problem = load_problem(config)

    if config.error_map:
        cells = approx_error_map(
            config.alphas, config.beta_grid, config.nu_grid, problem, config.threshold, workers=config.workers()
        )
        frame = records_frame(cells)[ERROR_MAP_COLUMNS]
        summary = {"exceeding_cells": sum(c.exceeds for c in cells), "unstable_cells": sum(not c.stable for c in cells)}
        emit(config, "stationary", frame=frame, summary=summary, default_format="csv")
        return ExitCode.OK

    if config.optimal_nu:
        result = optimal_nu_exact(config.alpha, config.beta, problem, config.nu_candidates)
        emit(config, "stationary", payload=result)
        return ExitCode.OK

    params = MomentumParams(alpha=config.alpha, beta=config.beta, nu=config.nu)
    cell = error_cell(config.alpha, config.beta, config.nu, problem, config.threshold)
    if not cell.stable:
        logger.warning("Parameters %s are unstable on this problem", params)
        emit(config, "stationary", frame=records_frame([cell])[ERROR_MAP_COLUMNS], default_format="csv")
        return ExitCode.UNSTABLE

    if (config.format or "csv") == "csv":
        emit(config, "stationary", frame=records_frame([cell])[ERROR_MAP_COLUMNS], default_format="csv")
        return ExitCode.OK
    report = analyze_stationary(params, problem)
    payload = {
        **cell.model_dump(),
        "sigma_x": report.sigma_x,
        "sigma_d": report.sigma_d,
        "sigma_dx": report.sigma_dx,
        "residual": report.residual,
        "spectral_radius": report.spectral_radius,
    }
    emit(config, "stationary", payload=payload)
    return ExitCode.OK
