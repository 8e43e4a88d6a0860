"""services/stationary.py

Stationary covariance of QHM driven by additive gradient noise.

With z = [d^{k-1}; x^k − x*] the iteration on a quadratic is linear,

    z ← T z + S ξ,     T = [[βI,     (1−β)A       ],
                            [−ανβI,  I − α(1−νβ)A ]],
                       S = [[(1−β)I], [−α(1−νβ)I]],

so the stationary covariance solves Σz = T Σz Tᵀ + S Σξ Sᵀ.  The exact solve
is the reference for the small-α Taylor predictions of tr(AΣx) and for the
approximation-error map.
"""
from __future__ import annotations

import logging
from typing import Any, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg

from momentum_lab.services.core import (
    InvalidArgumentError,
    MomentumParams,
    QuadraticProblem,
    UnstableSystemError,
    parallel_map,
)

logger = logging.getLogger(__name__)

DIRECT_MAX_DIM = 40
FIXED_POINT_MAX_ITER = 1_000_000
DEGENERATE_TRACE = 1e-15


class AugmentedSystem(NamedTuple):
    t_matrix: np.ndarray
    s_matrix: np.ndarray
    curvature: np.ndarray
    params: MomentumParams

    @property
    def dim(self) -> int:
        return self.curvature.shape[0]


class StationaryPredictions(BaseModel):
    model_config = ConfigDict(frozen=True)

    first_order_matrix_residual: float
    second_order_trace: float


class StationaryReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sigma_z: np.ndarray
    sigma_x: np.ndarray
    sigma_d: np.ndarray
    sigma_dx: np.ndarray
    sigma_xd: np.ndarray
    tr_a_sigma_x: float
    residual: float
    spectral_radius: float
    predictions: StationaryPredictions


class FirstOrderResidual(NamedTuple):
    residual_matrix: np.ndarray
    residual_norm: float


class StationaryOptimalNu(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    beta: float
    nu_exact: float
    nu_predicted: float
    tr_exact: float


class ErrorCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    beta: float
    nu: float
    tr_exact: Optional[float] = None
    tr_pred1: Optional[float] = None
    tr_pred2: Optional[float] = None
    rel_err: Optional[float] = None
    stable: bool
    exceeds: bool = False
    degenerate: bool = False


# ---------------------------------------------------------------------------
# Linear system -------------------------------------------------------------
# ---------------------------------------------------------------------------
def transition_matrices(params: MomentumParams, curvature: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b, v = params.alpha, params.beta, params.nu
    n = curvature.shape[0]
    eye = np.eye(n)
    t = np.block(
        [
            [b * eye, (1 - b) * curvature],
            [-a * v * b * eye, eye - a * (1 - v * b) * curvature],
        ]
    )
    s = np.vstack([(1 - b) * eye, -a * (1 - v * b) * eye])
    return t, s


def build_system(params: MomentumParams, problem: QuadraticProblem) -> AugmentedSystem:
    t, s = transition_matrices(params, np.asarray(problem.curvature))
    t.flags.writeable = False
    s.flags.writeable = False
    return AugmentedSystem(t_matrix=t, s_matrix=s, curvature=problem.curvature, params=params)


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(linalg.eigvals(matrix))))


def _residual(sigma: np.ndarray, t: np.ndarray, q: np.ndarray) -> float:
    return float(np.max(np.abs(sigma - t @ sigma @ t.T - q)))


def _solve(t: np.ndarray, q: np.ndarray, tol: float) -> Tuple[np.ndarray, float]:
    method = "direct" if t.shape[0] <= DIRECT_MAX_DIM else "bilinear"
    sigma = linalg.solve_discrete_lyapunov(t, q, method=method)
    sigma = (sigma + sigma.T) / 2
    res = _residual(sigma, t, q)

    # polish by the fixed-point map; contracts by ρ(T)² per sweep
    it = 0
    while res >= tol and it < FIXED_POINT_MAX_ITER:
        sigma = t @ sigma @ t.T + q
        sigma = (sigma + sigma.T) / 2
        it += 1
        if it % 1000 == 0:
            new = _residual(sigma, t, q)
            if new >= res:
                break
            res = new
    if it:
        res = _residual(sigma, t, q)
        logger.debug("Lyapunov polish: %d sweeps, residual %.3g", it, res)
    if res >= tol:
        logger.warning("Lyapunov residual %.3g above tolerance %.3g", res, tol)
    return sigma, res


def _second_order_trace(params: MomentumParams, curvature: np.ndarray, noise_cov: np.ndarray) -> float:
    a, b, v = params.alpha, params.beta, params.nu
    coef = 1 + (2 * v * b / (1 - b)) * (2 * v * b / (1 + b) - 1)
    return a / 2 * float(np.trace(noise_cov)) + a * a / 4 * coef * float(np.trace(curvature @ noise_cov))


def lyapunov_exact(system: AugmentedSystem, noise_cov: np.ndarray, tol: float = 1e-12) -> StationaryReport:
    t, s = system.t_matrix, system.s_matrix
    n = system.dim
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    if noise_cov.shape != (n, n):
        raise InvalidArgumentError(f"noise covariance must be {n}x{n}, got {noise_cov.shape}")

    rho = spectral_radius(t)
    if rho >= 1.0:
        raise UnstableSystemError(f"spectral radius {rho:.9g} >= 1; no stationary covariance")

    q = s @ noise_cov @ s.T
    sigma_z, res = _solve(t, (q + q.T) / 2, tol)
    sigma_x = sigma_z[n:, n:]
    curvature = np.asarray(system.curvature)
    first = curvature @ sigma_x + sigma_x @ curvature - system.params.alpha * noise_cov

    return StationaryReport(
        sigma_z=sigma_z,
        sigma_x=sigma_x,
        sigma_d=sigma_z[:n, :n],
        sigma_dx=sigma_z[:n, n:],
        sigma_xd=sigma_z[n:, :n],
        tr_a_sigma_x=float(np.trace(curvature @ sigma_x)),
        residual=res,
        spectral_radius=rho,
        predictions=StationaryPredictions(
            first_order_matrix_residual=float(np.max(np.abs(first))),
            second_order_trace=_second_order_trace(system.params, curvature, noise_cov),
        ),
    )


def analyze_stationary(params: MomentumParams, problem: QuadraticProblem, tol: float = 1e-12) -> StationaryReport:
    return lyapunov_exact(build_system(params, problem), problem.noise_cov, tol)


# ---------------------------------------------------------------------------
# Small-α predictions -------------------------------------------------------
# ---------------------------------------------------------------------------
def predict_first_order(params: MomentumParams, problem: QuadraticProblem, report: StationaryReport) -> FirstOrderResidual:
    """AΣx + ΣxA − αΣξ; shrinks like α²."""
    a = np.asarray(problem.curvature)
    residual = a @ report.sigma_x + report.sigma_x @ a - params.alpha * np.asarray(problem.noise_cov)
    return FirstOrderResidual(residual_matrix=residual, residual_norm=float(np.max(np.abs(residual))))


def predict_tr_second_order(params: MomentumParams, problem: QuadraticProblem) -> float:
    """(α/2)tr Σξ + (α²/4)(1 + (2νβ/(1−β))(2νβ/(1+β) − 1)) tr(AΣξ)."""
    if not params.beta < 1:
        raise InvalidArgumentError("beta must be below 1")
    return _second_order_trace(params, np.asarray(problem.curvature), np.asarray(problem.noise_cov))


def optimal_nu_prediction(beta: float) -> float:
    """Minimiser in ν of the second-order coefficient, clipped to 1."""
    if not 0.0 <= beta < 1.0:
        raise InvalidArgumentError(f"beta must lie in [0, 1), got {beta}")
    if beta >= 1 / 3:
        return (1 + beta) / (4 * beta)
    return 1.0


def _exact_trace(params: MomentumParams, problem: QuadraticProblem) -> Optional[float]:
    try:
        return analyze_stationary(params, problem).tr_a_sigma_x
    except UnstableSystemError:
        return None


def optimal_nu_exact(alpha: float, beta: float, problem: QuadraticProblem, nu_grid_size: int = 101) -> StationaryOptimalNu:
    """ν on a uniform [0, 1] grid minimising the exact tr(AΣx); ties go to the smallest ν."""
    nus = np.linspace(0.0, 1.0, nu_grid_size)
    exact = [_exact_trace(MomentumParams(alpha=alpha, beta=beta, nu=float(nu)), problem) for nu in nus]
    traces = np.array([np.inf if tr is None else tr for tr in exact])
    if not np.isfinite(traces).any():
        raise UnstableSystemError(f"no stable nu for alpha={alpha}, beta={beta}")
    i = int(np.flatnonzero(traces <= traces.min() + 1e-15)[0])
    return StationaryOptimalNu(
        alpha=alpha,
        beta=beta,
        nu_exact=float(nus[i]),
        nu_predicted=optimal_nu_prediction(beta),
        tr_exact=float(traces[i]),
    )


def modal_sigma_x(params: MomentumParams, problem: QuadraticProblem) -> np.ndarray:
    """Σx assembled from 2×2 per-eigenvalue blocks in the eigenbasis of A."""
    a, b, v = params.alpha, params.beta, params.nu
    lam, q = linalg.eigh(np.asarray(problem.curvature))
    noise = q.T @ np.asarray(problem.noise_cov) @ q
    s = np.array([1 - b, -a * (1 - v * b)])
    modes = [np.array([[b, (1 - b) * l], [-a * v * b, 1 - a * (1 - v * b) * l]]) for l in lam]

    n = len(lam)
    sigma = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            if noise[i, j] == 0.0:
                continue
            rhs = np.outer(s, s) * noise[i, j]
            vec = linalg.solve(np.eye(4) - np.kron(modes[j], modes[i]), rhs.ravel(order="F"))
            sigma[i, j] = sigma[j, i] = vec.reshape(2, 2, order="F")[1, 1]
    return q @ sigma @ q.T


# ---------------------------------------------------------------------------
# Approximation-error map ---------------------------------------------------
# ---------------------------------------------------------------------------
def error_cell(alpha: float, beta: float, nu: float, problem: QuadraticProblem, threshold: float = 0.2) -> ErrorCell:
    params = MomentumParams(alpha=alpha, beta=beta, nu=nu)
    try:
        report = analyze_stationary(params, problem)
    except UnstableSystemError:
        return ErrorCell(alpha=alpha, beta=beta, nu=nu, stable=False)

    exact = report.tr_a_sigma_x
    pred1 = alpha / 2 * float(np.trace(problem.noise_cov))
    pred2 = report.predictions.second_order_trace
    if abs(exact) < DEGENERATE_TRACE:
        return ErrorCell(
            alpha=alpha, beta=beta, nu=nu, tr_exact=exact, tr_pred1=pred1, tr_pred2=pred2, stable=True, degenerate=True
        )
    rel = abs(exact - pred2) / exact
    return ErrorCell(
        alpha=alpha,
        beta=beta,
        nu=nu,
        tr_exact=exact,
        tr_pred1=pred1,
        tr_pred2=pred2,
        rel_err=rel,
        stable=True,
        exceeds=rel > threshold,
    )


def _cell_task(task: Tuple[float, float, float, Any, float]) -> ErrorCell:
    return error_cell(*task)


def approx_error_map(
    alpha_list: Sequence[float],
    beta_grid: int,
    nu_grid: int,
    problem: QuadraticProblem,
    threshold: float = 0.2,
    *,
    workers: int = 1,
) -> List[ErrorCell]:
    """Relative error of the second-order trace prediction, row-major over (α, β, ν).

    β runs over [0, 1) and ν over [0, 1]; unstable cells are flagged, not solved.
    """
    if beta_grid < 1 or nu_grid < 1:
        raise InvalidArgumentError("grid sizes must be positive")
    betas = np.linspace(0.0, 1.0, beta_grid, endpoint=False)
    nus = np.linspace(0.0, 1.0, nu_grid)
    tasks = [
        (float(alpha), float(beta), float(nu), problem, threshold) for alpha in alpha_list for beta in betas for nu in nus
    ]
    logger.info("Error map: %d cells", len(tasks))
    cells = parallel_map(_cell_task, tasks, workers)
    unstable = sum(not c.stable for c in cells)
    if unstable:
        logger.info("Error map: %d unstable cells skipped", unstable)
    return cells
