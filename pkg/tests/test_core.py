import numpy as np
import pytest
from pydantic import ValidationError

from momentum_lab.services.core import (
    InvalidArgumentError,
    MomentumParams,
    OptimizerState,
    QuadraticProblem,
    Spectrum,
    benchmark_problem,
    cell_rng,
    covariance_factor,
    gaussian_noise_batch,
    gaussian_noise_draw,
    parallel_map,
    random_spd_problem,
)


def _square(x):
    return x * x


# ---- parameters ----------------------------------------------------------------
@pytest.mark.parametrize(
    "alpha, beta, nu",
    [(0.0, 0.5, 0.5), (-0.1, 0.5, 0.5), (0.1, 1.0, 0.5), (0.1, -0.1, 0.5), (0.1, 0.5, 1.5)],
)
def test_momentum_params_rejects_out_of_range(alpha, beta, nu):
    with pytest.raises(ValidationError):
        MomentumParams(alpha=alpha, beta=beta, nu=nu)


def test_momentum_params_unchecked_allows_zero_step():
    params = MomentumParams.unchecked(0.0, 0.9, 1.0)
    assert params.alpha == 0.0 and params.beta == 0.9


def test_spectrum_order_and_kappa():
    assert Spectrum.from_kappa(100.0, mu=0.5).ell == 50.0
    assert Spectrum(mu=1.0, ell=10.0).kappa == 10.0
    with pytest.raises(ValidationError):
        Spectrum(mu=2.0, ell=1.0)


# ---- problems --------------------------------------------------------------------
def test_problem_rejects_indefinite_curvature():
    with pytest.raises(ValidationError):
        QuadraticProblem(dim=2, curvature=[[1.0, 0.0], [0.0, -1.0]], optimum=[0.0, 0.0], noise_cov=np.eye(2))


def test_problem_rejects_asymmetric_matrix():
    with pytest.raises(ValidationError):
        QuadraticProblem(dim=2, curvature=[[1.0, 0.5], [0.0, 1.0]], optimum=[0.0, 0.0], noise_cov=np.eye(2))


def test_problem_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        QuadraticProblem(dim=2, curvature=np.eye(2), optimum=[0.0, 0.0, 0.0], noise_cov=np.eye(2))


def test_problem_arrays_are_read_only():
    problem = benchmark_problem(0)
    with pytest.raises(ValueError):
        problem.curvature[0, 0] = 5.0


def test_problem_loss_and_gradient():
    problem = QuadraticProblem(dim=2, curvature=np.diag([1.0, 4.0]), optimum=[1.0, -1.0], noise_cov=np.zeros((2, 2)))
    x = np.array([2.0, 0.0])
    assert problem.loss(x) == pytest.approx(0.5 * (1.0 + 4.0))
    np.testing.assert_allclose(problem.gradient(x), [1.0, 4.0])
    assert problem.loss(problem.optimum) == 0.0


def test_problem_json_keeps_matrices():
    problem = random_spd_problem(3, Spectrum(mu=0.5, ell=5.0), 0.2, seed=11)
    again = QuadraticProblem.from_json(problem.to_json())
    np.testing.assert_array_equal(again.curvature, problem.curvature)
    np.testing.assert_array_equal(again.noise_cov, problem.noise_cov)
    assert again.seed == 11


def test_random_spd_problem_spectrum():
    problem = random_spd_problem(5, Spectrum(mu=0.1, ell=10.0), 0.3, seed=4)
    np.testing.assert_allclose(problem.eigenvalues, np.geomspace(0.1, 10.0, 5), rtol=1e-10)
    np.testing.assert_allclose(problem.noise_cov, 0.3 * np.eye(5))


def test_random_spd_problem_is_seeded():
    a = random_spd_problem(4, Spectrum(mu=1.0, ell=3.0), 0.0, seed=9)
    b = random_spd_problem(4, Spectrum(mu=1.0, ell=3.0), 0.0, seed=9)
    c = random_spd_problem(4, Spectrum(mu=1.0, ell=3.0), 0.0, seed=10)
    np.testing.assert_array_equal(a.curvature, b.curvature)
    assert not np.array_equal(a.curvature, c.curvature)


def test_random_spd_problem_rejects_bad_arguments():
    with pytest.raises(InvalidArgumentError):
        random_spd_problem(0, Spectrum(mu=1.0, ell=2.0), 0.1, seed=0)
    with pytest.raises(InvalidArgumentError):
        random_spd_problem(2, Spectrum(mu=1.0, ell=2.0), -0.1, seed=0)


def test_benchmark_problem():
    problem = benchmark_problem(3)
    assert problem.dim == 2
    assert problem.spectrum.mu == pytest.approx(0.1)
    assert problem.spectrum.ell == pytest.approx(10.0)


# ---- noise -------------------------------------------------------------------------
def test_covariance_factor_handles_singular_cov():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor = covariance_factor(cov)
    np.testing.assert_allclose(factor @ factor.T, cov, atol=1e-12)


def test_noise_batch_covariance():
    problem = QuadraticProblem(
        dim=2, curvature=np.eye(2), optimum=[0.0, 0.0], noise_cov=[[2.0, 0.5], [0.5, 1.0]]
    )
    draws = gaussian_noise_batch(problem, np.random.default_rng(0), 200_000)
    assert draws.shape == (200_000, 2)
    np.testing.assert_allclose(np.cov(draws.T), problem.noise_cov, atol=0.03)


def test_single_draws_follow_the_batch_stream():
    problem = benchmark_problem(1)
    batch = gaussian_noise_batch(problem, np.random.default_rng(8), 3)
    rng = np.random.default_rng(8)
    singles = np.array([gaussian_noise_draw(problem, rng) for _ in range(3)])
    np.testing.assert_allclose(singles, batch, rtol=1e-12, atol=1e-15)


def test_cell_rng_streams_are_independent_and_repeatable():
    assert cell_rng(5, 0).random() == cell_rng(5, 0).random()
    assert cell_rng(5, 0).random() != cell_rng(5, 1).random()


# ---- state -------------------------------------------------------------------------
def test_optimizer_state_start():
    state = OptimizerState.start([1.0, 2.0])
    assert state.k == 0
    np.testing.assert_array_equal(state.d, [0.0, 0.0])


def test_optimizer_state_shape_mismatch():
    with pytest.raises(ValidationError):
        OptimizerState(x=[1.0, 2.0], d=[0.0], k=0)


# ---- parallel map --------------------------------------------------------------------
@pytest.mark.parametrize("workers", [1, 2])
def test_parallel_map_keeps_order(workers):
    assert parallel_map(_square, range(20), workers) == [i * i for i in range(20)]
