"""services/rate.py

Local convergence rate of QHM on quadratics with eigenvalues in [μ, L].

Per eigenvalue λ the iteration is the 2×2 linear map

    T(λ) = [[β,      (1−β)λ       ],
            [−ανβ,   1 − α(1−νβ)λ ]]

whose characteristic polynomial is t² − C₁t + C₂ with
C₁ = 1 − αλ + αλνβ + β and C₂ = β(1 − αλ + αλν).  The rate over the whole
spectrum is attained at one of the endpoints, which turns every optimum
search below into a search over (α, β) on two eigenvalues only.

Optimum searches
----------------
* ``optimal_alpha`` balances r(μ) = r(L) by a geometric scan followed by
  bisection and returns the smallest balancing α;
* ``optimal_params`` grid-searches β on [0, 1 − 1e-5] and polishes the best
  cell with a bounded scalar minimisation;
* ``verify_nu_monotonicity`` re-runs the optimum over a ν-grid and checks the
  strided non-increase of the optimal rate.
"""
from __future__ import annotations

import cmath
import logging
import math
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from cachetools import LRUCache
from pydantic import BaseModel, ConfigDict
from scipy.optimize import minimize_scalar

from momentum_lab.services.core import (
    InvalidArgumentError,
    MomentumLabError,
    MomentumParams,
    NoOptimumError,
    Spectrum,
    parallel_map,
)
from momentum_lab.settings import get_settings

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Search constants ----------------------------------------------------------
# ---------------------------------------------------------------------------
BETA_MAX = 1.0 - 1e-5
TIE_TOL = 1e-12
GAP_TOL = 1e-12
INTERIOR_SAMPLES = 32
_SCAN = np.geomspace(1e-8, 1.0 - 1e-12, 64)
_MAX_BISECTIONS = 200

# Cache key: (ν, κ, μ, grid size, refine) → OptimalParams
OPTIMUM_CACHE: LRUCache = LRUCache(maxsize=4096)


# ---------------------------------------------------------------------------
# Data-models ---------------------------------------------------------------
# ---------------------------------------------------------------------------
class RootRegime(str, Enum):
    REAL_POSITIVE = "real-positive-C1"
    REAL_NEGATIVE = "real-negative-C1"
    COMPLEX = "complex"


class CharCoeffs(NamedTuple):
    c1: float
    c2: float
    disc: float


class LocalRate(NamedTuple):
    rate: float
    regime: RootRegime


class RateReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    beta: float
    nu: float
    r_mu: float
    r_ell: float
    rate: float
    stable: bool
    regime_mu: RootRegime
    regime_ell: RootRegime


class OptimalParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    nu: float
    kappa: float
    alpha: float
    beta: float
    rate: float


class OptimalNu(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta: float
    nu: float
    alpha: float
    rate: float


class MonotonicityReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    passed: bool
    worst_violation: float
    kappas: List[float]
    nu_grid: List[float]
    rates: List[List[float]]


# ---------------------------------------------------------------------------
# Validation helpers --------------------------------------------------------
# ---------------------------------------------------------------------------
def _check_beta_nu(beta: float, nu: float) -> None:
    if not 0.0 <= beta < 1.0:
        raise InvalidArgumentError(f"beta must lie in [0, 1), got {beta}")
    if not 0.0 <= nu <= 1.0:
        raise InvalidArgumentError(f"nu must lie in [0, 1], got {nu}")


def _check_lambda(lam: float) -> None:
    if not lam > 0:
        raise InvalidArgumentError(f"eigenvalue must be positive, got {lam}")


# ---------------------------------------------------------------------------
# Per-eigenvalue rate -------------------------------------------------------
# ---------------------------------------------------------------------------
def char_coeffs(params: MomentumParams, lam: float) -> CharCoeffs:
    _check_lambda(lam)
    a, b, v = params.alpha, params.beta, params.nu
    s = a * lam
    c1 = 1 - s + s * v * b + b
    c2 = b * (1 - s + s * v)
    return CharCoeffs(c1=c1, c2=c2, disc=c1 * c1 - 4 * c2)


def _regime(c1: float, disc: float) -> RootRegime:
    if disc < 0:
        return RootRegime.COMPLEX
    return RootRegime.REAL_POSITIVE if c1 >= 0 else RootRegime.REAL_NEGATIVE


def local_rate(params: MomentumParams, lam: float) -> LocalRate:
    """Modulus of the larger root of t² − C₁t + C₂."""
    c1, c2, disc = char_coeffs(params, lam)
    regime = _regime(c1, disc)
    if regime is RootRegime.COMPLEX:
        return LocalRate(math.sqrt(c2), regime)
    return LocalRate(0.5 * (math.sqrt(disc) + abs(c1)), regime)


def spectral_radius_oracle(params: MomentumParams, lam: float) -> float:
    """Largest eigenvalue modulus of T(λ), computed independently of ``char_coeffs``."""
    _check_lambda(lam)
    a, b, v = params.alpha, params.beta, params.nu
    t11, t12 = b, (1 - b) * lam
    t21, t22 = -a * v * b, 1 - a * (1 - v * b) * lam
    trace = t11 + t22
    det = t11 * t22 - t12 * t21
    root = cmath.sqrt(trace * trace - 4 * det)
    return max(abs((trace + root) / 2), abs((trace - root) / 2))


def _rate_array(alpha, beta, nu, lam) -> np.ndarray:
    # vectorised local_rate; same operation order as char_coeffs
    s = alpha * lam
    c1 = 1 - s + s * nu * beta + beta
    c2 = beta * (1 - s + s * nu)
    disc = c1 * c1 - 4 * c2
    real = 0.5 * (np.sqrt(np.maximum(disc, 0.0)) + np.abs(c1))
    return np.where(disc >= 0, real, np.sqrt(np.maximum(c2, 0.0)))


def global_rate(params: MomentumParams, spectrum: Spectrum) -> RateReport:
    r_mu, regime_mu = local_rate(params, spectrum.mu)
    r_ell, regime_ell = local_rate(params, spectrum.ell)
    rate = max(r_mu, r_ell)

    if get_settings().debug_checks and spectrum.ell > spectrum.mu:
        interior = np.geomspace(spectrum.mu, spectrum.ell, INTERIOR_SAMPLES + 2)[1:-1]
        worst = max(spectral_radius_oracle(params, float(lam)) for lam in interior)
        if worst > rate + 1e-12:
            logger.error("Interior rate %.12g exceeds endpoint rate %.12g for %s", worst, rate, params)
            raise MomentumLabError(f"interior eigenvalue rate {worst:.12g} exceeds endpoint rate {rate:.12g}")

    return RateReport(
        alpha=params.alpha,
        beta=params.beta,
        nu=params.nu,
        r_mu=r_mu,
        r_ell=r_ell,
        rate=rate,
        stable=rate < 1.0,
        regime_mu=regime_mu,
        regime_ell=regime_ell,
    )


def stability_max_alpha(beta: float, nu: float, ell: float) -> float:
    """Open upper bound on α: 2(1+β) / (L(1 + β(1 − 2ν)))."""
    _check_beta_nu(beta, nu)
    _check_lambda(ell)
    return 2 * (1 + beta) / (ell * (1 + beta * (1 - 2 * nu)))


def rate_monotonicity_breakpoint(params: MomentumParams) -> float:
    """λ† where r(θ, ·) turns from non-increasing to non-decreasing."""
    return (1 - params.beta) / (params.alpha * (1 - math.sqrt(params.nu * params.beta)) ** 2)


# ---------------------------------------------------------------------------
# Balancing step size -------------------------------------------------------
# ---------------------------------------------------------------------------
def _optimal_alpha_batch(beta, nu, mu: float, ell: float, tol: float = 1e-8) -> np.ndarray:
    beta, nu = np.broadcast_arrays(np.asarray(beta, dtype=np.float64), np.asarray(nu, dtype=np.float64))
    beta, nu = beta.ravel(), nu.ravel()

    if mu == ell:
        # r(μ) = r(L) everywhere; take the α minimising the single-eigenvalue rate
        return (1 - beta) / (mu * (1 - np.sqrt(nu * beta)) ** 2)

    amax = 2 * (1 + beta) / (ell * (1 + beta * (1 - 2 * nu)))
    grid = amax[:, None] * _SCAN[None, :]
    b, v = beta[:, None], nu[:, None]
    gap = _rate_array(grid, b, v, mu) - _rate_array(grid, b, v, ell)
    feasible = gap <= GAP_TOL
    if not feasible.any(axis=1).all():
        bad = int(np.flatnonzero(~feasible.any(axis=1))[0])
        raise NoOptimumError(f"no balancing step size for beta={beta[bad]:.9g}, nu={nu[bad]:.9g}")

    first = feasible.argmax(axis=1)
    rows = np.arange(len(beta))
    hi = grid[rows, first]
    lo = np.where(first > 0, grid[rows, np.maximum(first - 1, 0)], hi)

    for _ in range(_MAX_BISECTIONS):
        active = hi - lo > tol * hi
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        ok = _rate_array(mid, beta, nu, mu) - _rate_array(mid, beta, nu, ell) <= GAP_TOL
        hi = np.where(active & ok, mid, hi)
        lo = np.where(active & ~ok, mid, lo)
    return hi


def optimal_alpha(beta: float, nu: float, spectrum: Spectrum, tol: float = 1e-8) -> float:
    """Smallest α with r(θ, μ) = r(θ, L), to relative precision ``tol``."""
    _check_beta_nu(beta, nu)
    if not tol > 0:
        raise InvalidArgumentError(f"tol must be positive, got {tol}")
    return float(_optimal_alpha_batch(beta, nu, spectrum.mu, spectrum.ell, tol)[0])


def _balanced_rate(beta: float, nu: float, mu: float, ell: float) -> Tuple[float, float]:
    alpha = float(_optimal_alpha_batch(beta, nu, mu, ell)[0])
    rate = max(float(_rate_array(alpha, beta, nu, mu)), float(_rate_array(alpha, beta, nu, ell)))
    return alpha, rate


def _first_minimum(values: np.ndarray) -> int:
    return int(np.flatnonzero(values <= values.min() + TIE_TOL)[0])


def optimal_params(
    nu: float,
    kappa: float,
    beta_grid_size: int = 1000,
    *,
    mu: float = 1.0,
    refine: bool = True,
) -> OptimalParams:
    """Best (α, β) for fixed ν on the spectrum [μ, μκ]."""
    if not kappa >= 1.0:
        raise InvalidArgumentError(f"kappa must be at least 1, got {kappa}")
    if beta_grid_size < 2:
        raise InvalidArgumentError("beta grid needs at least two points")
    _check_beta_nu(0.0, nu)

    key = (float(nu), float(kappa), float(mu), int(beta_grid_size), bool(refine))
    if key in OPTIMUM_CACHE:
        return OPTIMUM_CACHE[key]

    ell = mu * kappa
    betas = np.linspace(0.0, BETA_MAX, beta_grid_size)
    alphas = _optimal_alpha_batch(betas, nu, mu, ell)
    rates = np.maximum(_rate_array(alphas, betas, nu, mu), _rate_array(alphas, betas, nu, ell))
    i = _first_minimum(rates)
    best = OptimalParams(nu=nu, kappa=kappa, alpha=float(alphas[i]), beta=float(betas[i]), rate=float(rates[i]))

    if refine:
        lo, hi = betas[max(i - 1, 0)], betas[min(i + 1, beta_grid_size - 1)]
        res = minimize_scalar(
            lambda b: _balanced_rate(b, nu, mu, ell)[1],
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-10},
        )
        if res.fun < best.rate - TIE_TOL:
            alpha, rate = _balanced_rate(float(res.x), nu, mu, ell)
            best = OptimalParams(nu=nu, kappa=kappa, alpha=alpha, beta=float(res.x), rate=rate)

    logger.debug("optimum nu=%.4g kappa=%.6g: beta=%.9g alpha=%.9g rate=%.9g", nu, kappa, best.beta, best.alpha, best.rate)
    OPTIMUM_CACHE[key] = best
    return best


def optimal_nu_for_beta(beta: float, spectrum: Spectrum, nu_grid_size: int = 101) -> OptimalNu:
    """Best ν (and its balancing α) for a fixed β; ties go to the smallest ν."""
    _check_beta_nu(beta, 0.0)
    if nu_grid_size < 2:
        raise InvalidArgumentError("nu grid needs at least two points")
    nus = np.linspace(0.0, 1.0, nu_grid_size)
    alphas = _optimal_alpha_batch(beta, nus, spectrum.mu, spectrum.ell)
    rates = np.maximum(_rate_array(alphas, beta, nus, spectrum.mu), _rate_array(alphas, beta, nus, spectrum.ell))
    i = _first_minimum(rates)
    return OptimalNu(beta=beta, nu=float(nus[i]), alpha=float(alphas[i]), rate=float(rates[i]))


def _optimal_rate_task(task: Tuple[float, float, int]) -> float:
    nu, kappa, beta_grid_size = task
    return optimal_params(nu, kappa, beta_grid_size).rate


def verify_nu_monotonicity(
    kappa_samples: Sequence[float],
    nu_grid_size: int,
    stride: int = 10,
    tol: float = 1e-3,
    *,
    beta_grid_size: int = 1000,
    workers: int = 1,
) -> MonotonicityReport:
    """Check R*(ν_{i+stride}, κ) − R*(ν_i, κ) < tol over a uniform ν-grid on [0, 1]."""
    if nu_grid_size <= stride:
        raise InvalidArgumentError(f"nu grid size {nu_grid_size} must exceed stride {stride}")
    if stride < 1:
        raise InvalidArgumentError("stride must be positive")
    nus = np.linspace(0.0, 1.0, nu_grid_size)
    tasks = [(float(nu), float(kappa), beta_grid_size) for kappa in kappa_samples for nu in nus]
    logger.info("Optimal-rate sweep: %d kappa x %d nu", len(kappa_samples), nu_grid_size)
    flat = parallel_map(_optimal_rate_task, tasks, workers)

    table = np.asarray(flat, dtype=np.float64).reshape(len(kappa_samples), nu_grid_size)
    diffs = table[:, stride:] - table[:, :-stride]
    worst = max(float(diffs.max()), 0.0) if diffs.size else 0.0
    passed = bool((diffs < tol).all())
    if not passed:
        logger.warning("Optimal rate increases with nu by %.3g (tol %.3g)", worst, tol)
    return MonotonicityReport(
        passed=passed,
        worst_violation=worst,
        kappas=[float(k) for k in kappa_samples],
        nu_grid=nus.tolist(),
        rates=table.tolist(),
    )


def shb_no_tradeoff_interval(beta: float, spectrum: Spectrum) -> Optional[Tuple[float, float]]:
    """α-range where heavy ball (ν = 1) has complex roots at both μ and L, so R ≡ √β."""
    _check_beta_nu(beta, 1.0)
    if beta == 0.0:
        return None
    sb = math.sqrt(beta)
    lo = (1 - sb) / (spectrum.mu * (1 + sb))
    hi = (1 + sb) / (spectrum.ell * (1 - sb))
    if lo <= hi:
        return lo, hi
    if lo - hi <= 1e-12 * lo:
        # knife edge; the two bounds meet up to rounding
        return lo, lo
    return None
