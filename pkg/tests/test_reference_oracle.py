import math

import numpy as np
import numpy.testing as npt
import pytest
import scipy.linalg
from scipy.integrate import solve_ivp

from services.errors import ConfigurationError, ReferenceBudgetError, ReferenceGateError
from services.linear_ua import LinearOscSystem
from services.nonlinear_ua import oscillating_forcing
from services.reference_oracle import (
    ReferenceConfig,
    _nonlinear_route,
    dispersion_derivative,
    dispersion_function,
    landau_dispersion_rate,
    plasma_z,
    quadrature_oracle,
    reference_solve,
    rk4_integrate,
)


def _dop853(system, U0, T, nonlinear=None):
    def rhs(t, U):
        out = system.evaluate(t) @ U
        return out if nonlinear is None else out + nonlinear(U)

    return solve_ivp(rhs, (0.0, T), U0, method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]


@pytest.mark.parametrize("epsilon", [1.0, 0.01, 1e-5])
def test_scalar_reference_is_closed_form(one_plus_cosine, epsilon):
    system = LinearOscSystem({1: np.array([[1.0]])}, one_plus_cosine, epsilon)
    solution = reference_solve(system, [1.0], 1.0)
    assert solution.method == "closed_form"
    assert solution.final[0] == pytest.approx(math.exp(1.0 + epsilon * math.sin(1.0 / epsilon)), rel=1e-12)


def test_linear_reference_matches_dop853(particle_system, state4):
    solution = reference_solve(particle_system, state4, 1.0)
    assert solution.method == "linear_period_map"
    assert solution.self_convergence <= 1e-10
    npt.assert_allclose(solution.final, _dop853(particle_system, state4, 1.0), atol=1e-9)


def test_reference_samples_requested_times(particle_system, state4):
    solution = reference_solve(particle_system, state4, 1.0, times=[1.0, 0.5])
    npt.assert_array_equal(solution.times, [0.5, 1.0])
    npt.assert_allclose(solution.states[0], _dop853(particle_system, state4, 0.5), atol=1e-9)
    with pytest.raises(ValueError):
        reference_solve(particle_system, state4, 1.0, times=[2.0])


def test_nonlinear_reference_matches_dop853(particle_system):
    U0 = np.array([0.5, 0.2, -0.3, 0.4])
    nl = oscillating_forcing()
    solution = reference_solve(particle_system, U0, 0.5, nonlinear=nl)
    assert solution.method == "rk4"
    npt.assert_allclose(solution.final, _dop853(particle_system, U0, 0.5, nl), atol=1e-9)


def test_reference_budget_is_enforced(particle_system, state4):
    with pytest.raises(ReferenceBudgetError):
        reference_solve(particle_system, state4, 1.0, ReferenceConfig(max_steps=10))


def test_reference_gate_failure(particle_system, state4):
    cfg = ReferenceConfig(substeps_per_fast_period=8, self_convergence_tol=1e-300, max_refinements=0)
    with pytest.raises(ReferenceGateError):
        reference_solve(particle_system, state4, 1.0, cfg)


def test_rk4_integrate_exponential():
    out = rk4_integrate(lambda t, U: -U, np.array([1.0]), [0.5, 1.0], max_step=1e-3)
    npt.assert_allclose(out[:, 0], [math.exp(-0.5), math.exp(-1.0)], rtol=1e-12)


def test_quadrature_oracle_nested_polynomials():
    assert quadrature_oracle([lambda s: s], 0.0, 1.0) == pytest.approx(0.5, abs=1e-12)
    assert quadrature_oracle([lambda s: 1.0, lambda s: s], 0.0, 1.0) == pytest.approx(1 / 6, abs=1e-12)
    assert quadrature_oracle([lambda s: 1.0] * 3, 0.0, 2.0) == pytest.approx(8 / 6, abs=1e-12)


def test_quadrature_oracle_depth_limit():
    with pytest.raises(ValueError):
        quadrature_oracle([lambda s: 1.0] * 4, 0.0, 1.0)


def test_plasma_z_at_origin():
    assert plasma_z(0.0) == pytest.approx(1j * math.sqrt(math.pi), abs=1e-15)


@pytest.mark.parametrize("k, gamma", [(0.5, -0.1533), (0.4, -0.0661), (0.3, -0.0126)])
def test_landau_damping_rates(k, gamma):
    root = landau_dispersion_rate(k)
    assert root.imag == pytest.approx(gamma, abs=5e-4)
    assert abs(dispersion_function(root, k)) <= 1e-10


def test_landau_real_frequency_for_half_wavenumber():
    assert landau_dispersion_rate(0.5).real == pytest.approx(1.4156, abs=1e-3)


@pytest.mark.parametrize("k", [0.1, 0.7])
def test_wavenumber_outside_root_domain(k):
    with pytest.raises(ConfigurationError):
        landau_dispersion_rate(k)


def test_dispersion_derivative_matches_finite_difference():
    omega, k, h = complex(1.4, -0.15), 0.5, 1e-6
    fd = (dispersion_function(omega + h, k) - dispersion_function(omega - h, k)) / (2 * h)
    assert dispersion_derivative(omega, k) == pytest.approx(fd, rel=1e-7)


def test_stroboscopic_route_matches_direct_rk4(particle_system):
    system = particle_system.with_epsilon(1e-5)
    U0 = np.array([0.5, 0.2, -0.3, 0.4])
    nl = oscillating_forcing()
    strobe = reference_solve(system, U0, 0.02, ReferenceConfig(nonlinear_route="stroboscopic"), nonlinear=nl)
    assert strobe.method == "stroboscopic"
    assert strobe.self_convergence <= 1e-10
    direct = reference_solve(system, U0, 0.02, ReferenceConfig(nonlinear_route="rk4"), nonlinear=nl)
    assert direct.method == "rk4"
    npt.assert_allclose(strobe.final, direct.final, rtol=1e-8, atol=1e-10)


def test_stroboscopic_route_samples_requested_times(particle_system):
    system = particle_system.with_epsilon(1e-5)
    U0 = np.array([0.5, 0.2, -0.3, 0.4])
    cfg = ReferenceConfig(nonlinear_route="stroboscopic")
    solution = reference_solve(system, U0, 0.02, cfg, nonlinear=oscillating_forcing(), times=[0.01, 0.02])
    assert solution.states.shape == (2, 4)
    assert np.all(np.isfinite(solution.states))


def test_stroboscopic_route_limits(particle_system, state4):
    nl = oscillating_forcing()
    with pytest.raises(ConfigurationError):
        reference_solve(particle_system.with_epsilon(1.0), state4, 1.0,
                        ReferenceConfig(nonlinear_route="stroboscopic"), nonlinear=nl)
    with pytest.raises(ReferenceBudgetError):
        reference_solve(particle_system.with_epsilon(1e-6), state4, 1.0,
                        ReferenceConfig(nonlinear_route="stroboscopic", max_steps=1000), nonlinear=nl)
    with pytest.raises(ConfigurationError):
        ReferenceConfig(nonlinear_route="bogus")


def test_averaged_linear_reference_is_matrix_exponential(particle_system, state4):
    generator = particle_system.averaged()
    system = LinearOscSystem({0: generator}, particle_system.profile, 1e-6)
    assert system.is_autonomous
    solution = reference_solve(system, state4, 2.0, ReferenceConfig(max_steps=10))
    assert solution.method == "closed_form"
    npt.assert_allclose(solution.final, scipy.linalg.expm(2.0 * generator) @ state4, rtol=1e-13)


def test_averaged_nonlinear_reference_steps_on_unit_scale(particle_system):
    system = LinearOscSystem({0: particle_system.averaged()}, particle_system.profile, 1e-6)
    U0 = np.array([0.5, 0.2, -0.3, 0.4])
    nl = oscillating_forcing()
    solution = reference_solve(system, U0, 1.0, ReferenceConfig(max_steps=2000), nonlinear=nl)
    assert solution.method == "rk4"
    assert solution.dt_ref == pytest.approx(1.0 / solution.substeps)
    npt.assert_allclose(solution.final, _dop853(system, U0, 1.0, nl), atol=1e-9)


def test_auto_route_switches_when_direct_rk4_exceeds_budget(particle_system):
    cfg = ReferenceConfig(max_steps=100_000)
    assert _nonlinear_route(particle_system, 1.0, cfg) == "rk4"
    assert _nonlinear_route(particle_system.with_epsilon(1e-5), 0.02, cfg) == "stroboscopic"
    assert _nonlinear_route(particle_system.with_epsilon(1e-5), 0.005, cfg) == "rk4"
    forced = ReferenceConfig(nonlinear_route="rk4")
    assert _nonlinear_route(particle_system.with_epsilon(1e-5), 1.0, forced) == "rk4"
