"""services/sim.py

Trajectory simulation of QHM on quadratic problems.

* ``run_deterministic`` – noiseless run plus a fitted decay rate;
* ``run_stochastic`` – noisy run with post-burn-in statistics of x − x*;
* ``run_asymptotic`` – decaying schedules, running minimum of ‖∇F(x^k)‖;
* ``run_constant_and_drop`` – stages of constant parameters chained on one
  noise stream;
* ``run_sweep`` – (α, β, ν) grid of exact and simulated stationary losses.

Noise is drawn in chunks of ``CHUNK`` rows from one PCG64 stream per run, so
a seed fixes every draw regardless of how the run is split into stages.
Piecewise-constant schedules advance through the augmented recursion
z ← Tz + Sξ; time-varying schedules go through the QHM update step by step.
"""
from __future__ import annotations

import logging
import math
from typing import Any, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, PositiveFloat, model_validator

from momentum_lab.services.core import (
    InvalidArgumentError,
    MomentumParams,
    OptimizerState,
    QuadraticProblem,
    UnstableStageError,
    cell_rng,
    gaussian_noise_batch,
    parallel_map,
)
from momentum_lab.services.dynamics import (
    AsymptoticCheck,
    BetaToOneSchedule,
    ConstantAndDropSchedule,
    ConstantSchedule,
    ParamSchedule,
    Regime,
    Stage,
    _qhm_update,
    check_asymptotic_conditions,
    schedule_arrays,
)
from momentum_lab.services.rate import global_rate
from momentum_lab.services.stationary import error_cell, transition_matrices

logger = logging.getLogger(__name__)

CHUNK = 65536
DIVERGENCE_LIMIT = 1e12
UNDERFLOW_GUARD = 1e-280
MAX_RESAMPLE_ROUNDS = 1000

SWEEP_COLUMNS = ["alpha", "beta", "nu", "tr_exact", "tr_pred1", "tr_pred2", "rel_err", "stable", "mean_loss_emp"]


# ---------------------------------------------------------------------------
# Data-models ---------------------------------------------------------------
# ---------------------------------------------------------------------------
class NoiseModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["gaussian", "truncated"] = "gaussian"
    bound: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def _bound_for_truncated(self) -> "NoiseModel":
        if self.kind == "truncated" and self.bound is None:
            raise ValueError("truncated noise needs a bound")
        return self


class TrajectoryStats(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    steps_run: int
    iterates_kept: int
    mean_loss_window: Optional[float] = None
    empirical_cov: Optional[np.ndarray] = None
    measured_rate: Optional[float] = None
    grad_norm_min: float
    diverged: bool = False
    diverged_at: Optional[int] = None
    final_state: OptimizerState


class DeterministicRun(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    distances: np.ndarray
    losses: np.ndarray
    grad_norms: np.ndarray
    theoretical_rate: float
    measured_rate: Optional[float] = None
    rate_note: Optional[str] = None
    diverged: bool = False
    diverged_at: Optional[int] = None


class AsymptoticRun(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    regime: Regime
    check: AsymptoticCheck
    warnings: List[str]
    grad_norm_min_curve: np.ndarray
    stats: TrajectoryStats

    @property
    def initial_grad_norm(self) -> float:
        return float(self.grad_norm_min_curve[0])

    @property
    def final_grad_norm_min(self) -> float:
        return float(self.grad_norm_min_curve[-1])


class StageReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    stage: int
    params: MomentumParams
    steps: int
    theoretical_rate: float
    measured_rate: Optional[float] = None
    stats: TrajectoryStats


class _Chunk(NamedTuple):
    errors: np.ndarray
    d: np.ndarray
    e: np.ndarray


# ---------------------------------------------------------------------------
# Noise ---------------------------------------------------------------------
# ---------------------------------------------------------------------------
def draw_noise(problem: QuadraticProblem, rng: np.random.Generator, count: int, noise: NoiseModel) -> np.ndarray:
    xi = gaussian_noise_batch(problem, rng, count)
    if noise.kind == "gaussian":
        return xi
    for _ in range(MAX_RESAMPLE_ROUNDS):
        bad = np.linalg.norm(xi, axis=1) > noise.bound
        if not bad.any():
            return xi
        xi[bad] = gaussian_noise_batch(problem, rng, int(bad.sum()))
    raise InvalidArgumentError(f"noise bound {noise.bound} rejects almost every draw")


# ---------------------------------------------------------------------------
# Rate fitting --------------------------------------------------------------
# ---------------------------------------------------------------------------
def fit_rate(distances: np.ndarray) -> Optional[float]:
    """exp(slope) of log-distance over the second half of the usable curve.

    Non-monotone (oscillating) curves are fit on their local maxima.
    """
    d = np.asarray(distances, dtype=np.float64)
    idx = np.flatnonzero(np.isfinite(d) & (d > UNDERFLOW_GUARD))
    if idx.size < 4:
        return None
    idx = idx[idx >= idx[-1] // 2]
    y = d[idx]
    if np.any(np.diff(y) > 0):
        peaks = np.flatnonzero((y[1:-1] >= y[:-2]) & (y[1:-1] >= y[2:])) + 1
        if peaks.size >= 2:
            idx, y = idx[peaks], y[peaks]
    if idx.size < 2:
        return None
    slope = np.polyfit(idx.astype(np.float64), np.log(y), 1)[0]
    return float(math.exp(slope))


# ---------------------------------------------------------------------------
# Simulation core -----------------------------------------------------------
# ---------------------------------------------------------------------------
def _constant_runs(alpha: np.ndarray, beta: np.ndarray, nu: np.ndarray) -> List[Tuple[int, int]]:
    table = np.stack([alpha, beta, nu], axis=1)
    cuts = np.flatnonzero(np.any(table[1:] != table[:-1], axis=1)) + 1
    edges = np.concatenate([[0], cuts, [len(alpha)]])
    return list(zip(edges[:-1], edges[1:]))


def _linear_chunk(curvature, d, e, xi, alpha, beta, nu) -> _Chunk:
    n = curvature.shape[0]
    out = np.empty_like(xi)
    z = np.concatenate([d, e])
    for start, stop in _constant_runs(alpha, beta, nu):
        params = MomentumParams.unchecked(alpha[start], beta[start], nu[start])
        t, s = transition_matrices(params, curvature)
        w = xi[start:stop] @ s.T
        for i in range(stop - start):
            z = t @ z + w[i]
            out[start + i] = z[n:]
    return _Chunk(out, z[:n].copy(), z[n:].copy())


def _stepwise_chunk(curvature, d, e, xi, alpha, beta, nu) -> _Chunk:
    out = np.empty_like(xi)
    for i in range(len(xi)):
        g = curvature @ e + xi[i]
        e, d = _qhm_update(e, d, g, alpha[i], beta[i], nu[i])
        out[i] = e
    return _Chunk(out, d, e)


def _simulate(
    problem: QuadraticProblem,
    schedule: ParamSchedule,
    state: OptimizerState,
    steps: int,
    burn_in: int,
    rng: np.random.Generator,
    noise: NoiseModel,
    record_grad: bool = False,
) -> Tuple[TrajectoryStats, Optional[np.ndarray]]:
    curvature = np.asarray(problem.curvature)
    optimum = np.asarray(problem.optimum)
    n = problem.dim
    e = state.x - optimum
    d = np.array(state.d)
    piecewise = isinstance(schedule, (ConstantSchedule, ConstantAndDropSchedule))
    advance = _linear_chunk if piecewise else _stepwise_chunk

    sum_loss, sum_outer, kept = 0.0, np.zeros((n, n)), 0
    grad_min = float(np.linalg.norm(curvature @ e))
    grad_trace: List[np.ndarray] = []
    done, diverged_at = 0, None

    while done < steps:
        count = min(CHUNK, steps - done)
        xi = draw_noise(problem, rng, count, noise)
        alpha, beta, nu = schedule_arrays(schedule, state.k + done, count)
        with np.errstate(over="ignore", invalid="ignore"):
            chunk = advance(curvature, d, e, xi, alpha, beta, nu)
            dist = np.linalg.norm(chunk.errors, axis=1)
        bad = np.flatnonzero(~np.isfinite(dist) | (dist > DIVERGENCE_LIMIT))
        errors = chunk.errors if bad.size == 0 else chunk.errors[: bad[0]]
        last_e = e
        d, e = chunk.d, chunk.e

        grads = np.linalg.norm(errors @ curvature, axis=1)
        if grads.size:
            grad_min = min(grad_min, float(grads.min()))
        if record_grad:
            grad_trace.append(grads)

        first_kept = max(burn_in - done, 0)
        window = errors[first_kept:]
        if len(window):
            sum_loss += 0.5 * float(np.einsum("ij,jk,ik->", window, curvature, window))
            sum_outer += window.T @ window
            kept += len(window)

        if bad.size:
            diverged_at = state.k + done + int(bad[0]) + 1
            done += int(bad[0])
            logger.warning("Trajectory diverged at step %d", diverged_at)
            break
        done += count

    if diverged_at is not None:
        # the momentum buffer is not kept past divergence
        last_e = errors[-1] if len(errors) else last_e
        final = OptimizerState(x=optimum + last_e, d=np.full(n, np.nan), k=state.k + done)
    else:
        final = OptimizerState(x=optimum + e, d=d, k=state.k + done)
    stats = TrajectoryStats(
        steps_run=done,
        iterates_kept=kept,
        mean_loss_window=sum_loss / kept if kept else None,
        empirical_cov=(sum_outer + sum_outer.T) / (2 * kept) if kept else None,
        grad_norm_min=grad_min,
        diverged=diverged_at is not None,
        diverged_at=diverged_at,
        final_state=final,
    )
    trace = np.concatenate(grad_trace) if record_grad and grad_trace else (np.empty(0) if record_grad else None)
    return stats, trace


def _start(problem: QuadraticProblem, x0: Any) -> OptimizerState:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (problem.dim,):
        raise InvalidArgumentError(f"x0 must have shape ({problem.dim},), got {x0.shape}")
    return OptimizerState.start(x0)


# ---------------------------------------------------------------------------
# Public runs ---------------------------------------------------------------
# ---------------------------------------------------------------------------
def run_deterministic(problem: QuadraticProblem, params: MomentumParams, x0: Any, max_steps: int) -> DeterministicRun:
    state = _start(problem, x0)
    if max_steps < 1:
        raise InvalidArgumentError("max_steps must be positive")
    curvature = np.asarray(problem.curvature)
    theoretical = global_rate(params, problem.spectrum)

    e = state.x - problem.optimum
    d = np.zeros(problem.dim)
    distances = np.empty(max_steps + 1)
    losses = np.empty(max_steps + 1)
    grad_norms = np.empty(max_steps + 1)
    diverged_at = None
    last = max_steps
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(max_steps + 1):
            g = curvature @ e
            distances[k] = np.linalg.norm(e)
            losses[k] = 0.5 * float(e @ g)
            grad_norms[k] = np.linalg.norm(g)
            if not np.isfinite(distances[k]) or distances[k] > DIVERGENCE_LIMIT:
                diverged_at, last = k, k
                logger.warning("Noiseless run diverged at step %d (rate bound %.6g)", k, theoretical.rate)
                break
            if k < max_steps:
                e, d = _qhm_update(e, d, g, params.alpha, params.beta, params.nu)

    distances, losses, grad_norms = distances[: last + 1], losses[: last + 1], grad_norms[: last + 1]
    measured, note = None, None
    if not theoretical.stable:
        note = "unstable parameters; rate fit skipped"
    elif not np.any(distances > UNDERFLOW_GUARD):
        note = "zero distance; started at the optimum"
    else:
        measured = fit_rate(distances)
        if measured is None:
            note = "too few nonzero distances for a rate fit"
    return DeterministicRun(
        distances=distances,
        losses=losses,
        grad_norms=grad_norms,
        theoretical_rate=theoretical.rate,
        measured_rate=measured,
        rate_note=note,
        diverged=diverged_at is not None,
        diverged_at=diverged_at,
    )


def run_stochastic(
    problem: QuadraticProblem,
    schedule: ParamSchedule,
    x0: Any,
    max_steps: int,
    burn_in: Optional[int] = None,
    seed: int = 0,
    noise: Optional[NoiseModel] = None,
) -> TrajectoryStats:
    """Noisy run; statistics cover the iterates after step ``burn_in`` (default: half the run)."""
    if max_steps < 1:
        raise InvalidArgumentError("max_steps must be positive")
    burn_in = max_steps // 2 if burn_in is None else burn_in
    if not 0 <= burn_in < max_steps:
        raise InvalidArgumentError(f"burn_in must lie in [0, {max_steps}), got {burn_in}")
    state = _start(problem, x0)
    logger.info("Stochastic run: %d steps, burn-in %d, seed %d", max_steps, burn_in, seed)
    stats, _ = _simulate(problem, schedule, state, max_steps, burn_in, np.random.default_rng(seed), noise or NoiseModel())
    return stats


def _default_regime(schedule: ParamSchedule) -> Regime:
    return "beta_to_one" if isinstance(schedule, BetaToOneSchedule) else "beta_to_zero"


def run_asymptotic(
    problem: QuadraticProblem,
    schedule: ParamSchedule,
    x0: Any,
    max_steps: int,
    seed: int = 0,
    noise: Optional[NoiseModel] = None,
    regime: Optional[Regime] = None,
) -> AsymptoticRun:
    if max_steps < 1:
        raise InvalidArgumentError("max_steps must be positive")
    regime = regime or _default_regime(schedule)
    check = check_asymptotic_conditions(schedule, regime)
    warnings: List[str] = []
    if not check.satisfied:
        msg = f"schedule does not satisfy the {regime} conditions: {', '.join(check.violated)}"
        logger.warning(msg)
        warnings.append(msg)

    state = _start(problem, x0)
    stats, grads = _simulate(
        problem, schedule, state, max_steps, max_steps - 1, np.random.default_rng(seed), noise or NoiseModel(), True
    )
    initial = float(np.linalg.norm(problem.gradient(state.x)))
    curve = np.minimum.accumulate(np.concatenate([[initial], grads]))
    return AsymptoticRun(regime=regime, check=check, warnings=warnings, grad_norm_min_curve=curve, stats=stats)


def run_constant_and_drop(
    problem: QuadraticProblem,
    stages: Sequence[Stage] | ConstantAndDropSchedule,
    x0: Any,
    seed: int = 0,
    noise: Optional[NoiseModel] = None,
    rate_probe_steps: int = 2000,
) -> List[StageReport]:
    """Stages share one noise stream and hand (x, d) over; each keeps its second half."""
    stages = list(stages.stages if isinstance(stages, ConstantAndDropSchedule) else stages)
    if not stages:
        raise InvalidArgumentError("at least one stage is required")
    rates = [global_rate(stage.params, problem.spectrum) for stage in stages]
    for i, report in enumerate(rates):
        if not report.stable:
            raise UnstableStageError(i, report.rate)

    rng = np.random.default_rng(seed)
    noise = noise or NoiseModel()
    state = _start(problem, x0)
    probe = np.asarray(problem.optimum) + 1.0
    reports = []
    for i, (stage, theoretical) in enumerate(zip(stages, rates)):
        logger.info("Stage %d: alpha=%.6g beta=%.6g nu=%.6g for %d steps", i, *stage.params.model_dump().values(), stage.duration)
        stats, _ = _simulate(
            problem, ConstantSchedule(params=stage.params), state, stage.duration, stage.duration // 2, rng, noise
        )
        state = stats.final_state
        reports.append(
            StageReport(
                stage=i,
                params=stage.params,
                steps=stage.duration,
                theoretical_rate=theoretical.rate,
                measured_rate=run_deterministic(problem, stage.params, probe, rate_probe_steps).measured_rate,
                stats=stats,
            )
        )
        if stats.diverged:
            break
    return reports


# ---------------------------------------------------------------------------
# Sweep ---------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _sweep_cell(task: Tuple[int, float, float, float, QuadraticProblem, np.ndarray, int, int, int, NoiseModel]) -> dict:
    index, alpha, beta, nu, problem, x0, steps, burn_in, seed, noise = task
    params = MomentumParams(alpha=alpha, beta=beta, nu=nu)
    row = dict.fromkeys(SWEEP_COLUMNS, None)
    row.update(alpha=alpha, beta=beta, nu=nu, stable=False)
    if not global_rate(params, problem.spectrum).stable:
        return row
    cell = error_cell(alpha, beta, nu, problem)
    if not cell.stable:
        return row
    stats, _ = _simulate(
        problem, ConstantSchedule(params=params), OptimizerState.start(x0), steps, burn_in, cell_rng(seed, index), noise
    )
    row.update(
        tr_exact=cell.tr_exact,
        tr_pred1=cell.tr_pred1,
        tr_pred2=cell.tr_pred2,
        rel_err=cell.rel_err,
        stable=not stats.diverged,
        mean_loss_emp=stats.mean_loss_window,
    )
    return row


def run_sweep(
    problem: QuadraticProblem,
    alphas: Sequence[float],
    betas: Sequence[float],
    nus: Sequence[float],
    steps: int = 1000,
    seed: int = 0,
    x0: Any = None,
    burn_in: int = 0,
    workers: int = 1,
    noise: Optional[NoiseModel] = None,
) -> pd.DataFrame:
    """Row-major (α, β, ν) grid; every cell owns the stream ``cell_rng(seed, index)``."""
    if not 0 <= burn_in < steps:
        raise InvalidArgumentError(f"burn_in must lie in [0, {steps}), got {burn_in}")
    start = np.asarray(problem.optimum if x0 is None else x0, dtype=np.float64)
    noise = noise or NoiseModel()
    grid = [(float(a), float(b), float(v)) for a in alphas for b in betas for v in nus]
    tasks = [(i, a, b, v, problem, start, steps, burn_in, seed, noise) for i, (a, b, v) in enumerate(grid)]
    logger.info("Sweep: %d cells x %d steps on %d worker(s)", len(tasks), steps, workers)
    rows = parallel_map(_sweep_cell, tasks, workers)
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    logger.info("Sweep: %d of %d cells stable", int(frame["stable"].sum()), len(frame))
    return frame
