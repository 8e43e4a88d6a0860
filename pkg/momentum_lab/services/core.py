"""services/core.py

Shared domain types for the momentum toolkit: parameter triples, curvature
spectra, quadratic test problems and optimizer state, plus the seeded problem
generator and Gaussian noise draws used by every other service.

All models are frozen pydantic models; numpy fields are copied on input and
marked read-only, so instances can be shared between workers.

Usage example
-------------
>>> problem = random_spd_problem(2, Spectrum(mu=0.1, ell=10.0), 0.3, seed=7)
>>> xi = gaussian_noise_draw(problem, np.random.default_rng(0))
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, List, Sequence, TypeVar

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    PrivateAttr,
    computed_field,
    field_serializer,
    field_validator,
    model_validator,
)
from scipy import linalg

# ---- logging --------------------------------------------------------------
logger = logging.getLogger(__name__)

# ---- constants ------------------------------------------------------------
SYMMETRY_RTOL = 1e-12
PSD_JITTER = 1e-14

T = TypeVar("T")
R = TypeVar("R")


# ---- errors ---------------------------------------------------------------
class MomentumLabError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(MomentumLabError, ValueError):
    pass


class UnstableSystemError(MomentumLabError):
    """Spectral radius of the transition matrix is not below one."""


class UnstableStageError(UnstableSystemError):
    def __init__(self, stage: int, rate: float) -> None:
        super().__init__(f"stage {stage} is unstable on this problem (rate={rate:.9g})")
        self.stage = stage
        self.rate = rate


class NoOptimumError(MomentumLabError):
    pass


# ---- array helpers --------------------------------------------------------
def _frozen_array(value: Any, ndim: int) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if ndim == 1 and arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-D array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _symmetrized(value: Any, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    scale = max(float(np.max(np.abs(arr))), 1.0) if arr.size else 1.0
    if np.max(np.abs(arr - arr.T)) > SYMMETRY_RTOL * scale:
        raise ValueError(f"{name} is not symmetric")
    arr = (arr + arr.T) / 2
    arr.flags.writeable = False
    return arr


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Lower factor F with F Fᵀ = cov; PSD (singular) covariances allowed."""
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        pass
    try:
        linalg.cholesky(cov + PSD_JITTER * np.eye(cov.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        raise InvalidArgumentError("noise covariance is not positive semidefinite") from exc
    w, v = linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


# ---- data-models ----------------------------------------------------------
class MomentumParams(BaseModel):
    """Constant QHM parameters (α, β, ν)."""

    model_config = ConfigDict(frozen=True)

    alpha: PositiveFloat
    beta: float = Field(ge=0.0, lt=1.0)
    nu: float = Field(ge=0.0, le=1.0)

    @classmethod
    def unchecked(cls, alpha: float, beta: float, nu: float) -> "MomentumParams":
        # α = 0 probes of the rate formulas
        return cls.model_construct(alpha=float(alpha), beta=float(beta), nu=float(nu))


class Spectrum(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: PositiveFloat
    ell: PositiveFloat

    @model_validator(mode="after")
    def _ordered(self) -> "Spectrum":
        if self.mu > self.ell:
            raise ValueError(f"mu={self.mu} exceeds L={self.ell}")
        return self

    @computed_field  # type: ignore[misc]
    @property
    def kappa(self) -> float:
        return self.ell / self.mu

    @classmethod
    def from_kappa(cls, kappa: float, mu: float = 1.0) -> "Spectrum":
        return cls(mu=mu, ell=mu * kappa)


class QuadraticProblem(BaseModel):
    """F(x) = ½ (x − x*)ᵀ A (x − x*) with additive gradient noise of covariance Σξ."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dim: PositiveInt
    curvature: np.ndarray
    optimum: np.ndarray
    noise_cov: np.ndarray
    seed: int | None = None

    _eigenvalues: np.ndarray = PrivateAttr()
    _noise_factor: np.ndarray = PrivateAttr()

    @field_validator("curvature", mode="before")
    @classmethod
    def _check_curvature(cls, v: Any) -> np.ndarray:
        arr = _symmetrized(v, "curvature")
        if np.min(linalg.eigvalsh(arr)) <= 0:
            raise ValueError("curvature must be positive definite")
        return arr

    @field_validator("noise_cov", mode="before")
    @classmethod
    def _check_noise(cls, v: Any) -> np.ndarray:
        arr = _symmetrized(v, "noise_cov")
        try:
            linalg.cholesky(arr + PSD_JITTER * np.eye(arr.shape[0]), lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("noise_cov must be positive semidefinite") from exc
        return arr

    @field_validator("optimum", mode="before")
    @classmethod
    def _check_optimum(cls, v: Any) -> np.ndarray:
        return _frozen_array(v, 1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "QuadraticProblem":
        n = self.dim
        if self.curvature.shape != (n, n) or self.noise_cov.shape != (n, n):
            raise ValueError(f"matrices must be {n}x{n}")
        if self.optimum.shape != (n,):
            raise ValueError(f"optimum must have length {n}")
        return self

    def model_post_init(self, __context: Any) -> None:
        eig = linalg.eigvalsh(self.curvature)
        eig.flags.writeable = False
        self._eigenvalues = eig
        factor = covariance_factor(np.asarray(self.noise_cov))
        factor.flags.writeable = False
        self._noise_factor = factor

    @field_serializer("curvature", "noise_cov", "optimum")
    def _dump_array(self, arr: np.ndarray) -> list:
        return arr.tolist()

    # ---- derived quantities ----
    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eigenvalues

    @property
    def noise_factor(self) -> np.ndarray:
        return self._noise_factor

    @property
    def spectrum(self) -> Spectrum:
        return Spectrum(mu=float(self._eigenvalues[0]), ell=float(self._eigenvalues[-1]))

    def loss(self, x: np.ndarray) -> float:
        e = np.asarray(x) - self.optimum
        return 0.5 * float(e @ self.curvature @ e)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.curvature @ (np.asarray(x) - self.optimum)

    # ---- (de)serialization ----
    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QuadraticProblem":
        return cls.model_validate(json.loads(text))


class OptimizerState(BaseModel):
    """Iterate x^k and momentum buffer d^{k-1}; d starts at zero."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    x: np.ndarray
    d: np.ndarray
    k: NonNegativeInt = 0

    @field_validator("x", "d", mode="before")
    @classmethod
    def _vector(cls, v: Any) -> np.ndarray:
        return _frozen_array(v, 1)

    @model_validator(mode="after")
    def _same_shape(self) -> "OptimizerState":
        if self.x.shape != self.d.shape:
            raise ValueError(f"x has shape {self.x.shape} but d has {self.d.shape}")
        return self

    @classmethod
    def start(cls, x0: Sequence[float] | np.ndarray) -> "OptimizerState":
        x0 = np.asarray(x0, dtype=np.float64)
        return cls(x=x0, d=np.zeros_like(x0), k=0)


# ---- core functions -------------------------------------------------------
def random_spd_problem(dim: int, spectrum: Spectrum, noise_scale: float, seed: int) -> QuadraticProblem:
    """A = QΛQᵀ with log-uniform eigenvalues on [μ, L] and a seeded random rotation Q."""
    if dim < 1:
        raise InvalidArgumentError(f"dim must be positive, got {dim}")
    if noise_scale < 0:
        raise InvalidArgumentError(f"noise_scale must be nonnegative, got {noise_scale}")
    rng = np.random.default_rng(seed)
    eig = np.geomspace(spectrum.mu, spectrum.ell, dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    curvature = (q * eig) @ q.T
    return QuadraticProblem(
        dim=dim,
        curvature=(curvature + curvature.T) / 2,
        optimum=np.zeros(dim),
        noise_cov=noise_scale * np.eye(dim),
        seed=seed,
    )


def benchmark_problem(seed: int = 0) -> QuadraticProblem:
    """2-D reference problem: μ = 0.1, L = 10, Σξ = 0.3·I."""
    return random_spd_problem(2, Spectrum(mu=0.1, ell=10.0), 0.3, seed)


def gaussian_noise_draw(problem: QuadraticProblem, rng: np.random.Generator) -> np.ndarray:
    """One draw ξ ~ N(0, Σξ); never depends on the current iterate."""
    return problem.noise_factor @ rng.standard_normal(problem.dim)


def gaussian_noise_batch(problem: QuadraticProblem, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` draws stacked row-wise; same stream as repeated single draws."""
    return rng.standard_normal((count, problem.dim)) @ problem.noise_factor.T


def cell_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for sweep cell ``index``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Ordered map; fork-join over a process pool when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (4 * workers))
    logger.info("Mapping %d items over %d workers", len(items), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
