import math

import numpy as np
import pytest

from momentum_lab.services import rate
from momentum_lab.services.core import InvalidArgumentError, MomentumParams, Spectrum
from momentum_lab.services.rate import (
    RootRegime,
    char_coeffs,
    global_rate,
    local_rate,
    optimal_alpha,
    optimal_nu_for_beta,
    optimal_params,
    rate_monotonicity_breakpoint,
    shb_no_tradeoff_interval,
    spectral_radius_oracle,
    stability_max_alpha,
    verify_nu_monotonicity,
)
from momentum_lab.settings import Settings

KNIFE_BETA = (9 / 11) ** 2


def _random_params(rng, count):
    # α·λ spread over the stable and unstable ranges
    lam = np.exp(rng.uniform(np.log(0.01), np.log(100.0), count))
    s = rng.uniform(0.0, 4.0, count)
    beta = rng.uniform(0.0, 1.0, count)
    nu = rng.uniform(0.0, 1.0, count)
    for i in range(count):
        yield MomentumParams(alpha=max(s[i], 1e-6) / lam[i], beta=beta[i], nu=nu[i]), float(lam[i])


# ---- characteristic polynomial ---------------------------------------------
def test_char_coeffs_without_momentum():
    c = char_coeffs(MomentumParams(alpha=0.1, beta=0.0, nu=0.0), 1.0)
    assert c.c1 == pytest.approx(0.9)
    assert c.c2 == 0.0
    assert c.disc == pytest.approx(0.81)


def test_char_coeffs_at_zero_step():
    c = char_coeffs(MomentumParams.unchecked(0.0, 0.6, 0.3), 5.0)
    assert c.c1 == pytest.approx(1.6)
    assert c.c2 == pytest.approx(0.6)
    assert c.disc == pytest.approx(0.16)


def test_char_coeffs_complex_case():
    c = char_coeffs(MomentumParams(alpha=1.0, beta=0.9, nu=1.0), 1.0)
    assert (c.c1, c.c2) == pytest.approx((1.8, 0.9))
    assert c.disc == pytest.approx(-0.36)


def test_char_coeffs_rejects_nonpositive_lambda():
    with pytest.raises(InvalidArgumentError):
        char_coeffs(MomentumParams(alpha=0.1, beta=0.5, nu=0.5), 0.0)


# ---- local rate --------------------------------------------------------------
def test_local_rate_gradient_descent():
    r, regime = local_rate(MomentumParams(alpha=0.1, beta=0.0, nu=0.0), 1.0)
    assert r == pytest.approx(0.9)
    assert regime is RootRegime.REAL_POSITIVE


@pytest.mark.parametrize("lam", [1.0, 100.0])
def test_local_rate_heavy_ball_knife_edge(lam):
    r, _ = local_rate(MomentumParams(alpha=0.1, beta=KNIFE_BETA, nu=1.0), lam)
    assert r == pytest.approx(9 / 11, abs=1e-7)


def test_local_rate_divergent():
    r, regime = local_rate(MomentumParams(alpha=0.3, beta=0.0, nu=0.0), 10.0)
    assert r == pytest.approx(2.0)
    assert regime is RootRegime.REAL_NEGATIVE


def test_local_rate_complex_regime():
    r, regime = local_rate(MomentumParams(alpha=1.0, beta=0.9, nu=1.0), 1.0)
    assert regime is RootRegime.COMPLEX
    assert r == pytest.approx(math.sqrt(0.9), abs=1e-15)


def test_oracle_matches_local_rate():
    rng = np.random.default_rng(2024)
    for params, lam in _random_params(rng, 10_000):
        assert abs(local_rate(params, lam).rate - spectral_radius_oracle(params, lam)) < 1e-12


def test_oracle_special_cases():
    assert spectral_radius_oracle(MomentumParams.unchecked(0.0, 0.7, 0.4), 3.0) == pytest.approx(1.0, abs=1e-15)
    assert spectral_radius_oracle(MomentumParams(alpha=0.1, beta=0.0, nu=0.0), 1.0) == pytest.approx(0.9)


# ---- spectrum-wide rate --------------------------------------------------------
def test_global_rate_heavy_ball_optimum():
    report = global_rate(MomentumParams(alpha=0.1, beta=KNIFE_BETA, nu=1.0), Spectrum(mu=1.0, ell=100.0))
    assert report.rate == pytest.approx(9 / 11, abs=1e-7)
    assert report.stable


def test_global_rate_gradient_descent_optimum():
    report = global_rate(MomentumParams(alpha=2 / 101, beta=0.0, nu=0.0), Spectrum(mu=1.0, ell=100.0))
    assert report.rate == pytest.approx(99 / 101, abs=1e-12)
    assert report.r_mu == pytest.approx(report.r_ell, abs=1e-12)


def test_global_rate_unstable():
    report = global_rate(MomentumParams(alpha=0.021, beta=0.0, nu=0.0), Spectrum(mu=1.0, ell=100.0))
    assert report.rate == pytest.approx(1.1)
    assert not report.stable
    assert report.rate == max(report.r_mu, report.r_ell)


def test_global_rate_debug_checks(monkeypatch):
    monkeypatch.setattr(rate, "get_settings", lambda: Settings(debug_checks=True))
    report = global_rate(MomentumParams(alpha=0.05, beta=0.7, nu=0.6), Spectrum(mu=0.5, ell=20.0))
    assert report.stable


def test_endpoint_dominance():
    rng = np.random.default_rng(11)
    spectrum = Spectrum(mu=0.3, ell=30.0)
    interior = np.geomspace(spectrum.mu, spectrum.ell, 64)
    for _ in range(200):
        params = MomentumParams(
            alpha=rng.uniform(0.001, 0.2), beta=rng.uniform(0.0, 0.99), nu=rng.uniform(0.0, 1.0)
        )
        bound = global_rate(params, spectrum).rate
        assert max(local_rate(params, float(lam)).rate for lam in interior) <= bound + 1e-12


# ---- stability and shape ---------------------------------------------------------
@pytest.mark.parametrize(
    "beta,nu,ell,expected",
    [(0.0, 0.0, 1.0, 2.0), (0.9, 1.0, 10.0, 3.8), (0.5, 0.5, 2.0, 1.5)],
)
def test_stability_max_alpha(beta, nu, ell, expected):
    assert stability_max_alpha(beta, nu, ell) == pytest.approx(expected, rel=1e-12)


def test_stability_boundary_is_sharp():
    rng = np.random.default_rng(5)
    for _ in range(200):
        beta, nu, ell = rng.uniform(0.0, 0.99), rng.uniform(0.0, 1.0), rng.uniform(0.1, 100.0)
        amax = stability_max_alpha(beta, nu, ell)
        assert local_rate(MomentumParams(alpha=amax * (1 - 1e-6), beta=beta, nu=nu), ell).rate < 1.0
        assert local_rate(MomentumParams(alpha=amax * (1 + 1e-6), beta=beta, nu=nu), ell).rate >= 1.0


def test_stability_max_alpha_rejects_bad_beta():
    with pytest.raises(InvalidArgumentError):
        stability_max_alpha(1.0, 0.5, 1.0)


@pytest.mark.parametrize(
    "params,expected",
    [
        (MomentumParams(alpha=1.0, beta=0.0, nu=0.4), 1.0),
        (MomentumParams(alpha=0.1, beta=0.81, nu=1.0), 190.0),
        (MomentumParams(alpha=0.5, beta=0.25, nu=0.25), 8 / 3),
    ],
)
def test_rate_monotonicity_breakpoint(params, expected):
    assert rate_monotonicity_breakpoint(params) == pytest.approx(expected, rel=1e-12)


def test_rate_is_unimodal_around_breakpoint():
    rng = np.random.default_rng(8)
    for _ in range(100):
        params = MomentumParams(alpha=rng.uniform(0.01, 1.0), beta=rng.uniform(0.0, 0.95), nu=rng.uniform(0.0, 1.0))
        peak = rate_monotonicity_breakpoint(params)
        left = [local_rate(params, float(lam)).rate for lam in np.geomspace(peak / 50, peak, 100)]
        right = [local_rate(params, float(lam)).rate for lam in np.geomspace(peak, peak * 50, 100)]
        assert np.all(np.diff(left) <= 1e-12)
        assert np.all(np.diff(right) >= -1e-12)


# ---- optimum searches ------------------------------------------------------------
def test_optimal_alpha_gradient_descent():
    alpha = optimal_alpha(0.0, 0.0, Spectrum(mu=1.0, ell=100.0))
    assert alpha == pytest.approx(2 / 101, rel=1e-7)
    report = global_rate(MomentumParams(alpha=alpha, beta=0.0, nu=0.0), Spectrum(mu=1.0, ell=100.0))
    assert report.rate == pytest.approx(99 / 101, abs=1e-6)


def test_optimal_alpha_knife_edge():
    assert optimal_alpha(KNIFE_BETA, 1.0, Spectrum(mu=1.0, ell=100.0)) == pytest.approx(0.1, rel=1e-6)


def test_optimal_alpha_takes_smallest_plateau_point():
    expected = (1 - math.sqrt(0.9)) / (1 + math.sqrt(0.9))
    assert optimal_alpha(0.9, 1.0, Spectrum(mu=1.0, ell=10.0)) == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(0.0263340, abs=1e-7)


def test_optimal_alpha_single_eigenvalue():
    # κ = 1: the rate-minimising step for the lone eigenvalue
    assert optimal_alpha(0.0, 1.0, Spectrum(mu=2.0, ell=2.0)) == pytest.approx(0.5)


def test_optimal_params_heavy_ball():
    best = optimal_params(1.0, 100.0)
    assert best.rate == pytest.approx(9 / 11, abs=1e-4)
    assert abs(best.beta - KNIFE_BETA) <= (1 - 1e-5) / 999


def test_optimal_params_without_interpolation_is_gradient_descent():
    best = optimal_params(0.0, 100.0)
    assert best.rate == pytest.approx(99 / 101, abs=1e-6)
    assert best.beta == 0.0


def test_optimal_params_single_eigenvalue():
    best = optimal_params(1.0, 1.0)
    assert best.rate == pytest.approx(0.0, abs=1e-12)
    assert best.alpha == pytest.approx(1.0)


@pytest.mark.parametrize("scale", [0.01, 10.0])
def test_optimum_depends_only_on_condition_number(scale):
    base = optimal_params(0.7, 50.0, 200)
    scaled = optimal_params(0.7, 50.0, 200, mu=scale)
    assert abs(base.rate - scaled.rate) < 1e-6
    assert scaled.alpha * scale == pytest.approx(base.alpha, rel=1e-5)


def test_optimal_params_is_cached():
    first = optimal_params(0.5, 20.0, 100)
    assert optimal_params(0.5, 20.0, 100) is first


def test_optimal_params_rejects_small_kappa():
    with pytest.raises(InvalidArgumentError):
        optimal_params(1.0, 0.5)


def test_optimal_nu_for_beta():
    spectrum = Spectrum(mu=1.0, ell=100.0)
    best = optimal_nu_for_beta(0.5, spectrum, 51)
    assert 0.0 <= best.nu <= 1.0
    for nu in (0.0, 0.5, 1.0):
        alpha = optimal_alpha(0.5, nu, spectrum)
        assert best.rate <= global_rate(MomentumParams(alpha=alpha, beta=0.5, nu=nu), spectrum).rate + 1e-9


# ---- heavy-ball plateau ---------------------------------------------------------
def test_no_tradeoff_interval_bounds_and_rate():
    spectrum = Spectrum(mu=1.0, ell=10.0)
    lo, hi = shb_no_tradeoff_interval(0.9, spectrum)
    assert lo == pytest.approx(0.0263340, abs=1e-7)
    assert hi == pytest.approx(3.7973666, abs=1e-7)
    assert hi == pytest.approx((1 + math.sqrt(0.9)) / (10 * (1 - math.sqrt(0.9))), rel=1e-14)
    for alpha in np.linspace(lo, hi, 52)[1:-1]:
        report = global_rate(MomentumParams(alpha=float(alpha), beta=0.9, nu=1.0), spectrum)
        assert abs(report.rate - math.sqrt(0.9)) < 1e-12


def test_no_tradeoff_interval_knife_edge():
    lo, hi = shb_no_tradeoff_interval(KNIFE_BETA, Spectrum(mu=1.0, ell=100.0))
    assert lo == pytest.approx(0.1, rel=1e-12)
    assert hi == pytest.approx(0.1, rel=1e-12)


def test_no_tradeoff_interval_without_momentum():
    assert shb_no_tradeoff_interval(0.0, Spectrum(mu=1.0, ell=10.0)) is None


def test_no_tradeoff_interval_empty():
    assert shb_no_tradeoff_interval(0.1, Spectrum(mu=1.0, ell=1000.0)) is None


# ---- ν monotonicity of the optimum -------------------------------------------------
def test_nu_monotonicity_single_eigenvalue():
    report = verify_nu_monotonicity([1.0], 21, stride=5)
    assert report.passed
    assert report.worst_violation == 0.0


def test_nu_monotonicity_reduced():
    report = verify_nu_monotonicity([10.0, 100.0], 21, stride=5, beta_grid_size=200)
    assert report.passed
    assert len(report.rates) == 2 and len(report.rates[0]) == 21


def test_nu_monotonicity_rejects_short_grid():
    with pytest.raises(InvalidArgumentError):
        verify_nu_monotonicity([10.0], 10, stride=10)


@pytest.mark.slow
@pytest.mark.parametrize("kappas", [[10.0, 100.0, 1000.0], [1e6]])
def test_nu_monotonicity_full(kappas):
    assert verify_nu_monotonicity(kappas, 100).passed
