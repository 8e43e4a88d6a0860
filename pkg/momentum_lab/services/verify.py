"""
services/verify.py
~~~~~~~~~~~~~~~~~~
Self-check suite behind ``momentum_lab verify``.

Groups
------
rate        closed-form root modulus vs. the 2×2 eigenvalue oracle, α_max sharpness,
            heavy-ball plateau
optimal     heavy-ball optimum, κ-invariance, ν-monotonicity on a reduced grid
lyapunov    residuals on random instances, 1-D closed form, modal solve,
            plateau trace growth
taylor      first-order residual ~ α², second-order trace error ~ α³
nag         lookahead NAG vs. QHM(ν = β) with rescaled step
reductions  ν = 0 is SGD and ν = 1 is normalized heavy ball, bit for bit
schedules   classification of hand-built asymptotic schedules
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from momentum_lab.services import rate
from momentum_lab.services.core import (
    InvalidArgumentError,
    MomentumParams,
    OptimizerState,
    QuadraticProblem,
    Spectrum,
    benchmark_problem,
    random_spd_problem,
)
from momentum_lab.services.dynamics import (
    BETA_TENDS_TO_ZERO,
    CONSTANT_TAIL,
    SUM_ALPHA_SQ_FINITE,
    SUM_ALPHA_SQ_OVER_GAP_FINITE,
    BetaToOneSchedule,
    BetaToZeroSchedule,
    ConstantAndDropSchedule,
    Stage,
    _qhm_update,
    check_asymptotic_conditions,
    nag_original_step,
    qhm_step,
)
from momentum_lab.services.export import records_frame
from momentum_lab.services.stationary import analyze_stationary, modal_sigma_x, predict_first_order, predict_tr_second_order

logger = logging.getLogger(__name__)

GROUPS = ("rate", "optimal", "lyapunov", "taylor", "nag", "reductions", "schedules")
ALPHA_LADDER = np.array([0.02, 0.01, 0.005, 0.0025])
MONOTONICITY_KAPPAS = (10.0, 100.0, 1e3, 1e5)


class CheckResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    group: str
    name: str
    passed: bool
    value: Optional[float] = None
    limit: Optional[float] = None
    detail: str = ""


def _below(group: str, name: str, value: float, limit: float, detail: str = "") -> CheckResult:
    return CheckResult(group=group, name=name, passed=bool(value < limit), value=float(value), limit=limit, detail=detail)


def _within(group: str, name: str, value: float, lo: float, hi: float) -> CheckResult:
    return CheckResult(group=group, name=name, passed=bool(lo <= value <= hi), value=float(value), detail=f"[{lo}, {hi}]")


def _slope(alphas: np.ndarray, values: Sequence[float]) -> float:
    return float(np.polyfit(np.log(alphas), np.log(values), 1)[0])


# ---------------------------------------------------------------------------
# rate ----------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_rate(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    count = 10_000
    lam = np.exp(rng.uniform(math.log(0.01), math.log(100.0), count))
    s = rng.uniform(0.0, 4.0, count)
    beta = rng.uniform(0.0, 1.0, count)
    nu = rng.uniform(0.0, 1.0, count)
    worst = 0.0
    for i in range(count):
        params = MomentumParams(alpha=max(s[i], 1e-6) / lam[i], beta=beta[i], nu=nu[i])
        gap = abs(rate.local_rate(params, lam[i]).rate - rate.spectral_radius_oracle(params, lam[i]))
        worst = max(worst, gap)
    results = [_below("rate", "oracle_agreement", worst, 1e-12, f"{count} random (alpha, beta, nu, lambda)")]

    misses = 0
    for _ in range(100):
        b, v, ell = rng.uniform(0.0, 0.99), rng.uniform(0.0, 1.0), rng.uniform(0.1, 100.0)
        amax = rate.stability_max_alpha(b, v, ell)
        inside = rate.local_rate(MomentumParams(alpha=amax * (1 - 1e-6), beta=b, nu=v), ell).rate
        outside = rate.local_rate(MomentumParams(alpha=amax * (1 + 1e-6), beta=b, nu=v), ell).rate
        misses += not (inside < 1.0 <= outside)
    results.append(_below("rate", "stability_boundary", misses, 1, "failures out of 100"))

    spectrum = Spectrum(mu=1.0, ell=10.0)
    lo, hi = rate.shb_no_tradeoff_interval(0.9, spectrum)
    drift = max(
        abs(rate.global_rate(MomentumParams(alpha=float(a), beta=0.9, nu=1.0), spectrum).rate - math.sqrt(0.9))
        for a in np.linspace(lo, hi, 52)[1:-1]
    )
    results.append(_below("rate", "no_tradeoff_plateau", drift, 1e-12, f"alpha in [{lo:.9g}, {hi:.9g}]"))
    return results


# ---------------------------------------------------------------------------
# optimal -------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_optimal(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    results = []
    grid = 1000
    cell = rate.BETA_MAX / (grid - 1)
    for kappa in (10.0, 100.0, 1000.0):
        best = rate.optimal_params(1.0, kappa, grid)
        target = (math.sqrt(kappa) - 1) / (math.sqrt(kappa) + 1)
        results.append(_below("optimal", f"heavy_ball_rate_kappa_{kappa:g}", abs(best.rate - target), 1e-4))
        results.append(_below("optimal", f"heavy_ball_beta_kappa_{kappa:g}", abs(best.beta - target**2), cell * (1 + 1e-9)))

    drift = max(
        abs(rate.optimal_params(nu, kappa, 200).rate - rate.optimal_params(nu, kappa, 200, mu=10.0).rate)
        for nu in (0.0, 0.5, 1.0)
        for kappa in (10.0, 100.0)
    )
    results.append(_below("optimal", "kappa_invariance", drift, 1e-6))

    report = rate.verify_nu_monotonicity(MONOTONICITY_KAPPAS, 100, workers=workers)
    results.append(
        CheckResult(
            group="optimal",
            name="nu_monotonicity",
            passed=report.passed,
            value=report.worst_violation,
            limit=1e-3,
            detail=f"kappa in {list(MONOTONICITY_KAPPAS)}, 100 nu values",
        )
    )
    return results


# ---------------------------------------------------------------------------
# lyapunov ------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_lyapunov(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    worst_residual, worst_modal = 0.0, 0.0
    done = 0
    while done < 100:
        n = int(rng.integers(1, 9))
        mu = float(rng.uniform(0.05, 1.0))
        spectrum = Spectrum(mu=mu, ell=mu * rng.uniform(1.0, 100.0))
        problem = random_spd_problem(n, spectrum, rng.uniform(0.0, 1.0), int(rng.integers(2**31)))
        beta, nu = float(rng.uniform(0.0, 0.95)), float(rng.uniform(0.0, 1.0))
        amax = rate.stability_max_alpha(beta, nu, problem.spectrum.ell)
        params = MomentumParams(alpha=float(rng.uniform(0.05, 0.7)) * amax, beta=beta, nu=nu)
        if not rate.global_rate(params, problem.spectrum).stable:
            continue
        report = analyze_stationary(params, problem)
        worst_residual = max(worst_residual, report.residual)
        scale = max(float(np.max(np.abs(report.sigma_x))), 1e-300)
        worst_modal = max(worst_modal, float(np.max(np.abs(modal_sigma_x(params, problem) - report.sigma_x))) / scale)
        done += 1
    results = [
        _below("lyapunov", "residual", worst_residual, 1e-12, "100 random stable instances, n <= 8"),
        _below("lyapunov", "modal_solve", worst_modal, 1e-8, "relative to max |sigma_x|"),
    ]

    a, sigma2, alpha = 2.0, 0.7, 0.3
    scalar = QuadraticProblem(dim=1, curvature=[[a]], optimum=[0.0], noise_cov=[[sigma2]])
    exact = analyze_stationary(MomentumParams(alpha=alpha, beta=0.0, nu=0.0), scalar).tr_a_sigma_x
    results.append(_below("lyapunov", "sgd_closed_form", abs(exact - alpha * sigma2 / (2 - alpha * a)), 1e-12))

    problem = QuadraticProblem(dim=2, curvature=np.diag([1.0, 10.0]), optimum=np.zeros(2), noise_cov=np.eye(2))
    lo, hi = rate.shb_no_tradeoff_interval(0.9, problem.spectrum)
    traces = [
        analyze_stationary(MomentumParams(alpha=float(x), beta=0.9, nu=1.0), problem).tr_a_sigma_x
        for x in np.linspace(lo, hi, 52)[1:-1]
    ]
    increasing = bool(np.all(np.diff(traces) > 0))
    results.append(CheckResult(group="lyapunov", name="plateau_trace_increasing", passed=increasing))
    return results


# ---------------------------------------------------------------------------
# taylor --------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_taylor(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    problem = benchmark_problem()
    results = []
    for beta in (0.5, 0.9):
        for label, nu in (("0", 0.0), ("beta", beta), ("1", 1.0)):
            first, second = [], []
            for alpha in ALPHA_LADDER:
                params = MomentumParams(alpha=float(alpha), beta=beta, nu=nu)
                report = analyze_stationary(params, problem)
                first.append(predict_first_order(params, problem, report).residual_norm)
                second.append(abs(report.tr_a_sigma_x - predict_tr_second_order(params, problem)))
            tag = f"beta_{beta:g}_nu_{label}"
            results.append(_within("taylor", f"first_order_slope_{tag}", _slope(ALPHA_LADDER, first), 1.7, 2.3))
            results.append(_within("taylor", f"second_order_slope_{tag}", _slope(ALPHA_LADDER, second), 2.6, 3.4))
    return results


# ---------------------------------------------------------------------------
# nag -----------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_nag(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    alpha, beta = 0.05, 0.8
    qhm = MomentumParams(alpha=alpha / (1 - beta), beta=beta, nu=beta)
    nag = MomentumParams(alpha=alpha, beta=beta, nu=0.0)
    worst = 0.0
    for seed in range(20):
        problem = random_spd_problem(3, Spectrum(mu=0.5, ell=5.0), 0.0, seed)
        x0 = rng.standard_normal(3)
        a, b = OptimizerState.start(x0), OptimizerState.start(x0)
        for _ in range(100):
            lookahead = a.x - alpha * beta * a.d
            worst = max(worst, float(np.max(np.abs(lookahead - b.x))))
            a = nag_original_step(a, problem.gradient, nag)
            b = qhm_step(b, problem.gradient(b.x), qhm)
    return [_below("nag", "lookahead_matches_qhm", worst, 1e-10, "20 problems x 100 steps")]


# ---------------------------------------------------------------------------
# reductions ----------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_reductions(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    problem = random_spd_problem(4, Spectrum(mu=0.1, ell=10.0), 0.0, int(rng.integers(2**31)))
    x0 = rng.standard_normal(4)
    alpha, beta = 0.05, 0.7

    sgd_same = shb_same = True
    x_sgd, x_q0 = x0.copy(), x0.copy()
    x_shb, d_shb = x0.copy(), np.zeros(4)
    x_q1, d_q0, d_q1 = x0.copy(), np.zeros(4), np.zeros(4)
    for _ in range(1000):
        x_sgd = x_sgd - alpha * problem.gradient(x_sgd)
        x_q0, d_q0 = _qhm_update(x_q0, d_q0, problem.gradient(x_q0), alpha, beta, 0.0)
        sgd_same &= bool(np.array_equal(x_sgd, x_q0))

        d_shb = (1 - beta) * problem.gradient(x_shb) + beta * d_shb
        x_shb = x_shb - alpha * d_shb
        x_q1, d_q1 = _qhm_update(x_q1, d_q1, problem.gradient(x_q1), alpha, beta, 1.0)
        shb_same &= bool(np.array_equal(x_shb, x_q1))
    return [
        CheckResult(group="reductions", name="nu_zero_is_sgd", passed=sgd_same, detail="1000 steps, bitwise"),
        CheckResult(group="reductions", name="nu_one_is_normalized_heavy_ball", passed=shb_same, detail="1000 steps, bitwise"),
    ]


# ---------------------------------------------------------------------------
# schedules -----------------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_schedules(rng: np.random.Generator, workers: int) -> List[CheckResult]:
    drop = ConstantAndDropSchedule(stages=[Stage(params=MomentumParams(alpha=0.1, beta=0.9, nu=1.0), duration=10)])
    cases = [
        ("beta_to_one_pass", BetaToOneSchedule(omega=0.9, c=0.6), "beta_to_one", []),
        ("beta_to_one_slow_alpha", BetaToOneSchedule(omega=0.7, c=0.6), "beta_to_one", [SUM_ALPHA_SQ_OVER_GAP_FINITE]),
        ("beta_to_zero_pass", BetaToZeroSchedule(omega=1.0, beta0=0.5, beta_decay=0.99), "beta_to_zero", []),
        ("beta_to_zero_slow_alpha", BetaToZeroSchedule(omega=0.5, beta0=0.5, beta_decay=0.99), "beta_to_zero", [SUM_ALPHA_SQ_FINITE]),
        ("beta_to_zero_frozen_beta", BetaToZeroSchedule(omega=0.9, beta0=0.5, beta_decay=1.0), "beta_to_zero", [BETA_TENDS_TO_ZERO]),
        ("constant_and_drop", drop, "beta_to_one", [CONSTANT_TAIL]),
    ]
    results = []
    for name, schedule, regime, expected in cases:
        check = check_asymptotic_conditions(schedule, regime)
        results.append(
            CheckResult(
                group="schedules",
                name=name,
                passed=check.violated == expected and check.satisfied == (not expected),
                detail=", ".join(check.violated) or "all conditions hold",
            )
        )
    return results


_RUNNERS: Dict[str, Callable[[np.random.Generator, int], List[CheckResult]]] = {
    "rate": _check_rate,
    "optimal": _check_optimal,
    "lyapunov": _check_lyapunov,
    "taylor": _check_taylor,
    "nag": _check_nag,
    "reductions": _check_reductions,
    "schedules": _check_schedules,
}


def run_checks(only: Optional[Sequence[str]] = None, seed: int = 0, workers: int = 1) -> List[CheckResult]:
    groups = list(only) if only else list(GROUPS)
    unknown = [g for g in groups if g not in _RUNNERS]
    if unknown:
        raise InvalidArgumentError(f"unknown check group(s): {', '.join(unknown)}; choose from {', '.join(GROUPS)}")

    results: List[CheckResult] = []
    for group in groups:
        logger.info("Running %s checks", group)
        group_results = _RUNNERS[group](np.random.default_rng([seed, GROUPS.index(group)]), workers)
        for failed in (r for r in group_results if not r.passed):
            logger.warning("Check %s/%s failed (value=%s, limit=%s)", failed.group, failed.name, failed.value, failed.limit)
        results.extend(group_results)
    return results


def results_table(results: Sequence[CheckResult]) -> pd.DataFrame:
    return records_frame(results)
