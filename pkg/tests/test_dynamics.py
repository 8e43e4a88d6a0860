import numpy as np
import pytest
from pydantic import ValidationError

from momentum_lab.services.core import (
    InvalidArgumentError,
    MomentumParams,
    OptimizerState,
    Spectrum,
    random_spd_problem,
)
from momentum_lab.services.dynamics import (
    CONSTANT_TAIL,
    BETA_TENDS_TO_ZERO,
    SUM_ALPHA_SQ_FINITE,
    SUM_ALPHA_SQ_OVER_GAP_FINITE,
    BetaToOneSchedule,
    BetaToZeroSchedule,
    ConstantAndDropSchedule,
    ConstantSchedule,
    SwitchConfig,
    check_asymptotic_conditions,
    nag_original_step,
    parse_schedule,
    qhm_step,
    qhm_step_switched,
    schedule_arrays,
    schedule_at,
)


# ---- qhm_step --------------------------------------------------------------
def test_nu_zero_is_sgd():
    state = OptimizerState(x=[1.0, 1.0], d=[0.0, 0.0])
    new = qhm_step(state, np.array([2.0, 2.0]), MomentumParams(alpha=0.5, beta=0.9, nu=0.0))
    assert new.x.tolist() == [0.0, 0.0]
    assert new.k == 1


def test_hand_evaluated_step():
    state = OptimizerState(x=[1.0], d=[4.0])
    new = qhm_step(state, np.array([0.0]), MomentumParams(alpha=1.0, beta=0.5, nu=1.0))
    assert new.d.tolist() == [2.0]
    assert new.x.tolist() == [-1.0]


def test_step_does_not_mutate_input():
    state = OptimizerState.start([1.0, 2.0])
    qhm_step(state, np.array([1.0, 1.0]), MomentumParams(alpha=0.1, beta=0.5, nu=0.5))
    assert state.x.tolist() == [1.0, 2.0]
    assert state.k == 0


def test_dimension_mismatch():
    state = OptimizerState.start([1.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        qhm_step(state, np.ones(3), MomentumParams(alpha=0.1, beta=0.5, nu=0.5))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nu_zero_trajectory_bit_exact(seed):
    problem = random_spd_problem(3, Spectrum(mu=0.5, ell=4.0), 1.0, seed)
    rng = np.random.default_rng(seed)
    params = MomentumParams(alpha=0.2, beta=0.9, nu=0.0)
    state = OptimizerState.start(np.ones(3))
    x_sgd = np.ones(3)
    for _ in range(1000):
        g = problem.gradient(state.x) + rng.standard_normal(3)
        state = qhm_step(state, g, params)
        x_sgd = x_sgd - params.alpha * g
        assert np.array_equal(state.x, x_sgd)


def test_nu_one_is_normalized_heavy_ball_bit_exact():
    problem = random_spd_problem(3, Spectrum(mu=0.5, ell=4.0), 1.0, 4)
    rng = np.random.default_rng(4)
    params = MomentumParams(alpha=0.3, beta=0.8, nu=1.0)
    state = OptimizerState.start(np.ones(3))
    x, d = np.ones(3), np.zeros(3)
    for _ in range(1000):
        g = problem.gradient(state.x) + rng.standard_normal(3)
        state = qhm_step(state, g, params)
        d = (1 - params.beta) * g + params.beta * d
        x = x - params.alpha * d
        assert np.array_equal(state.x, x)


@pytest.mark.parametrize("nu", [0.0, 0.3, 0.7, 1.0])
def test_beta_zero_is_sgd(nu):
    problem = random_spd_problem(2, Spectrum(mu=1.0, ell=3.0), 0.5, 9)
    params = MomentumParams(alpha=0.25, beta=0.0, nu=nu)
    state = OptimizerState.start([1.0, -2.0])
    x = np.array([1.0, -2.0])
    for _ in range(200):
        g = problem.gradient(state.x)
        state = qhm_step(state, g, params)
        x = x - params.alpha * problem.gradient(x)
    np.testing.assert_allclose(state.x, x, rtol=1e-12, atol=1e-15)


def test_momentum_buffer_weights():
    # basis-vector gradient stream exposes the averaging weights directly
    beta, steps = 0.7, 12
    params = MomentumParams(alpha=0.1, beta=beta, nu=1.0)
    state = OptimizerState.start(np.zeros(steps))
    for i in range(steps):
        state = qhm_step(state, np.eye(steps)[i], params)
    k = steps - 1
    expected = (1 - beta) * beta ** (k - np.arange(steps))
    np.testing.assert_allclose(state.d, expected, rtol=1e-12)
    assert state.d.sum() == pytest.approx(1 - beta ** (k + 1), rel=1e-12)


# ---- switched variant -----------------------------------------------------
def test_switch_drops_momentum():
    switch = SwitchConfig(rho=1.0)
    state = OptimizerState(x=[0.0, 0.0], d=[2.0, 0.0])
    g = np.array([0.3, -0.1])
    new = qhm_step_switched(state, g, MomentumParams(alpha=0.1, beta=0.9, nu=0.5), switch)
    assert np.array_equal(new.d, g)


def test_switch_hand_evaluated():
    state = OptimizerState.start([0.0])
    new = qhm_step_switched(state, np.array([1.0]), MomentumParams(alpha=1.0, beta=0.5, nu=1.0), SwitchConfig(rho=1.0))
    assert new.d.tolist() == [1.0]
    assert new.x.tolist() == [-1.0]


def test_switch_with_large_rho_matches_qhm_without_momentum():
    params = MomentumParams(alpha=0.4, beta=0.0, nu=1.0)
    state = OptimizerState(x=[1.0, 2.0], d=[0.5, -0.5])
    g = np.array([0.25, 1.5])
    switched = qhm_step_switched(state, g, params, SwitchConfig(rho=1e300))
    plain = qhm_step(state, g, params)
    assert np.array_equal(switched.x, plain.x)


def test_switch_config():
    assert SwitchConfig.from_gradient_bound(3.0).rho == 30.0
    with pytest.raises(ValidationError):
        SwitchConfig(enabled=True, rho=0.0)
    with pytest.raises(InvalidArgumentError):
        qhm_step_switched(
            OptimizerState.start([0.0]),
            np.array([1.0]),
            MomentumParams(alpha=1.0, beta=0.5, nu=1.0),
            SwitchConfig(enabled=False, rho=0.0),
        )


# ---- original Nesterov form -----------------------------------------------
def test_nag_zero_buffer_is_gradient_step():
    problem = random_spd_problem(2, Spectrum(mu=1.0, ell=5.0), 0.0, 3)
    x0 = np.array([0.5, -1.0])
    new = nag_original_step(OptimizerState.start(x0), problem.gradient, MomentumParams(alpha=0.1, beta=0.9, nu=0.0))
    np.testing.assert_allclose(new.x, x0 - 0.1 * problem.gradient(x0), rtol=1e-14)


def test_nag_hand_evaluated():
    state = OptimizerState(x=[1.0], d=[1.0])
    new = nag_original_step(state, lambda x: x, MomentumParams(alpha=0.1, beta=0.9, nu=0.0))
    assert new.d[0] == pytest.approx(1.81, abs=1e-14)
    assert new.x[0] == pytest.approx(0.819, abs=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_nag_equivalent_to_qhm_with_nu_equal_beta(seed):
    problem = random_spd_problem(3, Spectrum(mu=0.5, ell=5.0), 0.0, seed)
    alpha_nag, beta = 0.05, 0.8
    nag_params = MomentumParams(alpha=alpha_nag, beta=beta, nu=0.0)
    qhm_params = MomentumParams(alpha=alpha_nag / (1 - beta), beta=beta, nu=beta)
    x0 = np.random.default_rng(seed).standard_normal(3)
    nag = OptimizerState.start(x0)
    qhm = OptimizerState.start(x0)
    for _ in range(100):
        y = nag.x - alpha_nag * beta * nag.d
        np.testing.assert_allclose(qhm.x, y, rtol=0, atol=1e-10)
        nag = nag_original_step(nag, problem.gradient, nag_params)
        qhm = qhm_step(qhm, problem.gradient(qhm.x), qhm_params)


# ---- schedules --------------------------------------------------------------
def test_constant_schedule():
    params = MomentumParams(alpha=0.1, beta=0.9, nu=1.0)
    assert schedule_at(ConstantSchedule(params=params), 1000) == params


def test_beta_to_one_schedule_values():
    schedule = BetaToOneSchedule(omega=0.9, c=0.6)
    first = schedule_at(schedule, 0)
    assert first.alpha == 1.0
    assert first.nu * first.beta == pytest.approx(0.0, abs=1e-15)
    p = schedule_at(schedule, 99)
    assert p.alpha == pytest.approx(0.015849, abs=1e-6)
    assert p.nu * p.beta == pytest.approx(0.93690, abs=1e-5)
    assert p.nu == p.beta


def test_beta_to_one_nu_policy_one():
    p = schedule_at(BetaToOneSchedule(omega=0.9, c=0.6, nu_policy="one"), 99)
    assert p.nu == 1.0
    assert p.beta == pytest.approx(1 - 100 ** -0.6, rel=1e-14)


def test_beta_to_zero_schedule_values():
    p = schedule_at(BetaToZeroSchedule(omega=1.0, beta0=0.5, beta_decay=0.5, alpha0=2.0, nu=0.7), 3)
    assert p.alpha == pytest.approx(0.5)
    assert p.beta == pytest.approx(0.0625)
    assert p.nu == 0.7


def test_constant_and_drop_arrays():
    schedule = ConstantAndDropSchedule(
        stages=[
            {"params": {"alpha": 1.0, "beta": 0.9, "nu": 0.7}, "duration": 3},
            {"params": {"alpha": 0.1, "beta": 0.5, "nu": 1.0}, "duration": 2},
        ]
    )
    alpha, beta, nu = schedule_arrays(schedule, 0, 7)
    assert alpha.tolist() == [1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1]
    assert beta.tolist() == [0.9, 0.9, 0.9, 0.5, 0.5, 0.5, 0.5]
    assert nu[2] == 0.7 and nu[3] == 1.0


def test_schedule_arrays_agree_with_schedule_at():
    schedule = BetaToOneSchedule(omega=0.8, c=0.55)
    alpha, beta, nu = schedule_arrays(schedule, 10, 5)
    for i in range(5):
        p = schedule_at(schedule, 10 + i)
        assert (p.alpha, p.beta, p.nu) == pytest.approx((alpha[i], beta[i], nu[i]), rel=1e-14)


def test_negative_step_index():
    with pytest.raises(InvalidArgumentError):
        schedule_at(BetaToOneSchedule(omega=0.9, c=0.6), -1)


def test_parse_schedule_from_config():
    schedule = parse_schedule('{"variant": "beta_to_one", "omega": 0.9, "c": 0.6, "nu_policy": "equal_to_beta"}')
    assert schedule == BetaToOneSchedule(omega=0.9, c=0.6)
    assert isinstance(parse_schedule({"variant": "constant", "params": {"alpha": 0.1, "beta": 0.5, "nu": 1}}), ConstantSchedule)
    with pytest.raises(ValidationError):
        parse_schedule({"variant": "beta_to_one", "omega": 0.9, "c": 0.6, "rho": 1})


# ---- asymptotic conditions ---------------------------------------------------
@pytest.mark.parametrize(
    "schedule,regime,violated",
    [
        (BetaToOneSchedule(omega=0.9, c=0.6), "beta_to_one", []),
        (BetaToOneSchedule(omega=0.7, c=0.6), "beta_to_one", [SUM_ALPHA_SQ_OVER_GAP_FINITE]),
        (BetaToZeroSchedule(omega=1.0, beta0=0.5, beta_decay=0.99), "beta_to_zero", []),
        (BetaToZeroSchedule(omega=0.5, beta0=0.5, beta_decay=0.99), "beta_to_zero", [SUM_ALPHA_SQ_FINITE]),
        (BetaToZeroSchedule(omega=0.9, beta0=0.5, beta_decay=1.0), "beta_to_zero", [BETA_TENDS_TO_ZERO]),
        (
            ConstantAndDropSchedule(stages=[{"params": {"alpha": 0.1, "beta": 0.9, "nu": 1.0}, "duration": 10}]),
            "beta_to_one",
            [CONSTANT_TAIL],
        ),
    ],
)
def test_check_asymptotic_conditions(schedule, regime, violated):
    check = check_asymptotic_conditions(schedule, regime)
    assert check.violated == violated
    assert check.satisfied == (not violated)


def test_saturating_schedule_fails_vanishing_regime():
    check = check_asymptotic_conditions(BetaToOneSchedule(omega=0.9, c=0.6), "beta_to_zero")
    assert not check.satisfied
    assert BETA_TENDS_TO_ZERO in check.violated
