"""services/dynamics.py

QHM update and its relatives:

* ``qhm_step`` – normalized QHM, d ← (1−β)g + βd, x ← x − α[(1−ν)g + νd];
* ``qhm_step_switched`` – unnormalized variant whose momentum is dropped
  whenever ‖d‖ exceeds a threshold ρ (handles unbounded noise);
* ``nag_original_step`` – Nesterov's method in its lookahead form;
* parameter schedules for the two asymptotic regimes (β_k → 0 and
  ν_kβ_k → 1) and the piecewise-constant "constant and drop" schedule,
  together with an exact checker of their summability conditions.

Steppers are pure: they return a new ``OptimizerState`` and never mutate.
"""
from __future__ import annotations

import logging
import math
from typing import Annotated, Callable, List, Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, TypeAdapter, model_validator

from momentum_lab.services.core import InvalidArgumentError, MomentumParams, OptimizerState

logger = logging.getLogger(__name__)

Regime = Literal["beta_to_zero", "beta_to_one"]

# condition names reported by check_asymptotic_conditions
SUM_ALPHA_DIVERGES = "sum_alpha_diverges"
SUM_ALPHA_SQ_FINITE = "sum_alpha_sq_finite"
BETA_TENDS_TO_ZERO = "beta_tends_to_zero"
BETA_SUP_BELOW_ONE = "beta_sup_below_one"
SUM_GAP_SQ_FINITE = "sum_one_minus_nu_beta_sq_finite"
SUM_ALPHA_SQ_OVER_GAP_FINITE = "sum_alpha_sq_over_one_minus_nu_beta_finite"
BETA_TENDS_TO_ONE = "beta_tends_to_one"
CONSTANT_TAIL = "constant tail"


# ---------------------------------------------------------------------------
# Schedules -----------------------------------------------------------------
# ---------------------------------------------------------------------------
class _Schedule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ConstantSchedule(_Schedule):
    variant: Literal["constant"] = "constant"
    params: MomentumParams


class BetaToZeroSchedule(_Schedule):
    """α_k = α₀(k+1)^−ω, β_k = β₀·decay^k, fixed ν."""

    variant: Literal["beta_to_zero"] = "beta_to_zero"
    omega: float = Field(ge=0.0)
    beta0: float = Field(ge=0.0, lt=1.0)
    beta_decay: float = Field(ge=0.0, le=1.0)
    alpha0: PositiveFloat = 1.0
    nu: float = Field(default=1.0, ge=0.0, le=1.0)


class BetaToOneSchedule(_Schedule):
    """α_k = α₀(k+1)^−ω, 1 − ν_kβ_k = (k+1)^−c."""

    variant: Literal["beta_to_one"] = "beta_to_one"
    omega: float = Field(ge=0.0)
    c: float = Field(ge=0.0)
    nu_policy: Literal["equal_to_beta", "one"] = "equal_to_beta"
    alpha0: PositiveFloat = 1.0


class Stage(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    params: MomentumParams
    duration: PositiveInt


class ConstantAndDropSchedule(_Schedule):
    variant: Literal["constant_and_drop"] = "constant_and_drop"
    stages: List[Stage] = Field(min_length=1)

    @property
    def boundaries(self) -> np.ndarray:
        return np.cumsum([s.duration for s in self.stages])


ParamSchedule = Annotated[
    Union[ConstantSchedule, BetaToZeroSchedule, BetaToOneSchedule, ConstantAndDropSchedule],
    Field(discriminator="variant"),
]
_SCHEDULE_ADAPTER: TypeAdapter = TypeAdapter(ParamSchedule)


def parse_schedule(data: dict | str) -> ParamSchedule:
    """Schedule from its config form, e.g. ``{"variant": "beta_to_one", "omega": 0.9, "c": 0.6}``."""
    if isinstance(data, str):
        return _SCHEDULE_ADAPTER.validate_json(data)
    return _SCHEDULE_ADAPTER.validate_python(data)


class SwitchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    rho: float = math.inf

    @model_validator(mode="after")
    def _positive_rho(self) -> "SwitchConfig":
        if self.enabled and not self.rho > 0:
            raise ValueError("rho must be positive when the switch is enabled")
        return self

    @classmethod
    def from_gradient_bound(cls, g_est: float) -> "SwitchConfig":
        return cls(enabled=True, rho=10.0 * g_est)


class AsymptoticCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    regime: Regime
    satisfied: bool
    violated: List[str] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# Steppers ------------------------------------------------------------------
# ---------------------------------------------------------------------------
def _qhm_update(
    x: np.ndarray, d: np.ndarray, g: np.ndarray, alpha: float, beta: float, nu: float
) -> Tuple[np.ndarray, np.ndarray]:
    d_new = (1 - beta) * g + beta * d
    x_new = x - alpha * ((1 - nu) * g + nu * d_new)
    return x_new, d_new


def _check_dims(state: OptimizerState, gradient: np.ndarray) -> np.ndarray:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.x.shape:
        raise InvalidArgumentError(f"gradient shape {g.shape} does not match iterate shape {state.x.shape}")
    return g


def qhm_step(state: OptimizerState, gradient: np.ndarray, params: MomentumParams) -> OptimizerState:
    g = _check_dims(state, gradient)
    x_new, d_new = _qhm_update(state.x, state.d, g, params.alpha, params.beta, params.nu)
    return OptimizerState(x=x_new, d=d_new, k=state.k + 1)


def qhm_step_switched(
    state: OptimizerState, gradient: np.ndarray, params: MomentumParams, switch: SwitchConfig
) -> OptimizerState:
    """Unnormalized QHM; momentum is kept only while ‖d‖ ≤ ρ."""
    if not switch.enabled:
        raise InvalidArgumentError("qhm_step_switched requires an enabled switch")
    g = _check_dims(state, gradient)
    keep = 1.0 if float(np.linalg.norm(state.d)) <= switch.rho else 0.0
    d_new = g + keep * params.beta * state.d
    x_new = state.x - params.alpha * ((1 - params.nu) * g + params.nu * d_new)
    return OptimizerState(x=x_new, d=d_new, k=state.k + 1)


def nag_original_step(
    state: OptimizerState,
    gradient_oracle: Callable[[np.ndarray], np.ndarray],
    params: MomentumParams,
) -> OptimizerState:
    """d ← βd + ∇f(x − αβd); x ← x − αd.  ``params.nu`` is ignored.

    With constant parameters the points y = x − αβd follow QHM with ν = β
    and step α/(1 − β).
    """
    lookahead = state.x - params.alpha * params.beta * state.d
    g = _check_dims(state, gradient_oracle(lookahead))
    d_new = params.beta * state.d + g
    x_new = state.x - params.alpha * d_new
    return OptimizerState(x=x_new, d=d_new, k=state.k + 1)


# ---------------------------------------------------------------------------
# Schedule evaluation -------------------------------------------------------
# ---------------------------------------------------------------------------
def _beta_to_one_momentum(schedule: BetaToOneSchedule, kp1: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    product = 1.0 - kp1 ** (-schedule.c)
    if schedule.nu_policy == "equal_to_beta":
        beta = np.sqrt(product)
        return beta, beta
    return product, np.ones_like(product)


def schedule_arrays(schedule: ParamSchedule, start: int, count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(α_k, β_k, ν_k) for k = start, …, start + count − 1."""
    if start < 0 or count < 0:
        raise InvalidArgumentError("step indices must be nonnegative")
    k = np.arange(start, start + count, dtype=np.float64)
    if isinstance(schedule, ConstantSchedule):
        p = schedule.params
        return np.full(count, p.alpha), np.full(count, p.beta), np.full(count, p.nu)
    if isinstance(schedule, BetaToZeroSchedule):
        alpha = schedule.alpha0 * (k + 1) ** (-schedule.omega)
        beta = schedule.beta0 * schedule.beta_decay**k
        return alpha, beta, np.full(count, schedule.nu)
    if isinstance(schedule, BetaToOneSchedule):
        alpha = schedule.alpha0 * (k + 1) ** (-schedule.omega)
        beta, nu = _beta_to_one_momentum(schedule, k + 1)
        return alpha, beta, nu
    # constant and drop; the last stage extends past the end
    idx = np.minimum(np.searchsorted(schedule.boundaries, k, side="right"), len(schedule.stages) - 1)
    table = np.array([[s.params.alpha, s.params.beta, s.params.nu] for s in schedule.stages])
    rows = table[idx]
    return rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].copy()


def schedule_at(schedule: ParamSchedule, k: int) -> MomentumParams:
    if k < 0:
        raise InvalidArgumentError(f"step index must be nonnegative, got {k}")
    if isinstance(schedule, ConstantSchedule):
        return schedule.params
    alpha, beta, nu = schedule_arrays(schedule, k, 1)
    return MomentumParams(alpha=float(alpha[0]), beta=float(beta[0]), nu=float(nu[0]))


def check_asymptotic_conditions(schedule: ParamSchedule, regime: Regime) -> AsymptoticCheck:
    """Exact summability check for the parametric families (no truncation)."""
    if isinstance(schedule, (ConstantSchedule, ConstantAndDropSchedule)):
        return AsymptoticCheck(regime=regime, satisfied=False, violated=[CONSTANT_TAIL])

    omega = schedule.omega
    violated: list[str] = []
    if not omega <= 1.0:
        violated.append(SUM_ALPHA_DIVERGES)

    if isinstance(schedule, BetaToZeroSchedule):
        vanishing = schedule.beta0 == 0.0 or schedule.beta_decay < 1.0
        if regime == "beta_to_zero":
            if not 2 * omega > 1.0:
                violated.append(SUM_ALPHA_SQ_FINITE)
            if not vanishing:
                violated.append(BETA_TENDS_TO_ZERO)
            # β₀ < 1 and decay ≤ 1 are enforced by the model
        else:
            # 1 − ν_kβ_k does not vanish, so Σ(1 − ν_kβ_k)² diverges
            if not (schedule.nu * schedule.beta0 == 1.0 and schedule.beta_decay == 1.0):
                violated.append(SUM_GAP_SQ_FINITE)
            if not 2 * omega > 1.0:
                violated.append(SUM_ALPHA_SQ_OVER_GAP_FINITE)
            violated.append(BETA_TENDS_TO_ONE)
    else:
        c = schedule.c
        if regime == "beta_to_zero":
            if not 2 * omega > 1.0:
                violated.append(SUM_ALPHA_SQ_FINITE)
            if c > 0:
                violated.extend([BETA_TENDS_TO_ZERO, BETA_SUP_BELOW_ONE])
        else:
            if not 2 * c > 1.0:
                violated.append(SUM_GAP_SQ_FINITE)
            if not 2 * omega - c > 1.0:
                violated.append(SUM_ALPHA_SQ_OVER_GAP_FINITE)
            if not c > 0:
                violated.append(BETA_TENDS_TO_ONE)

    check = AsymptoticCheck(regime=regime, satisfied=not violated, violated=violated)
    if violated:
        logger.debug("Schedule %s fails %s conditions: %s", schedule.variant, regime, ", ".join(violated))
    return check
