import numpy as np
import numpy.testing as npt
import pytest
from scipy.integrate import solve_ivp

from services.linear_ua import LinearOscSystem, StepContext, step_explicit
from services.nonlinear_ua import (
    NonlinearTerm,
    check_jacobian,
    from_potential,
    htilde,
    oscillating_forcing,
    step_nl_order1,
    step_nl_order2,
    zero,
)
from services.sav_schemes import PotentialField

POINTS = np.array([[0.3, -0.7, 0.1, 0.2], [1.2, 0.4, -1.0, 0.0], [-0.5, 2.0, 0.3, -0.3]])


def _constant_term(c):
    c = np.asarray(c, dtype=float)
    return NonlinearTerm(
        func=lambda U: np.broadcast_to(c, U.shape).copy(),
        dim=c.size,
        jacobian_func=lambda U: np.zeros(U.shape + (c.size,)),
        name="constant",
    )


def test_oscillating_forcing_jacobian():
    assert check_jacobian(oscillating_forcing(), POINTS) < 1e-7


def test_finite_difference_fallback_is_accurate():
    term = oscillating_forcing()
    fallback = NonlinearTerm(func=term.func, dim=4, name="no_jacobian")
    npt.assert_allclose(fallback.jacobian(POINTS[0]), term.jacobian(POINTS[0]), atol=1e-6)


def test_potential_forcing_is_negative_gradient():
    term = from_potential(PotentialField.quadratic())
    U = np.array([1.0, -2.0, 3.0, 4.0])
    npt.assert_allclose(term(U), [0.0, 0.0, -1.0, 2.0])
    jac = term.jacobian(U)
    npt.assert_allclose(jac[2:, :2], -np.eye(2))
    assert np.count_nonzero(jac[:2]) == 0


def test_oscillating_potential_agrees_with_forcing():
    term = from_potential(PotentialField.oscillating())
    npt.assert_allclose(term(POINTS), oscillating_forcing()(POINTS), atol=1e-14)


@pytest.mark.parametrize("t_n", [0.0, 0.41])
def test_zero_forcing_reduces_to_linear_schemes(particle_system, state4, t_n):
    nl = zero(4)
    ctx1 = StepContext(t_n, 0.05, 1)
    ctx2 = StepContext(t_n, 0.05, 2)
    npt.assert_allclose(step_nl_order1(particle_system, nl, ctx1, state4),
                        step_explicit(particle_system, ctx1, state4), atol=1e-15)
    npt.assert_allclose(step_nl_order2(particle_system, nl, ctx2, state4),
                        step_explicit(particle_system, ctx2, state4), atol=1e-15)


def test_constant_forcing_with_constant_matrix_is_second_order_taylor(cosine):
    M = np.array([[0.0, 1.0], [-2.0, 0.3]])
    sys = LinearOscSystem({0: M}, cosine, 0.1)
    c = np.array([0.5, -1.0])
    U = np.array([1.0, 2.0])
    dt = 0.1
    out = step_nl_order2(sys, _constant_term(c), StepContext(0.2, dt), U)
    expected = U + dt * M @ U + 0.5 * dt ** 2 * M @ M @ U + dt * c + 0.5 * dt ** 2 * M @ c
    npt.assert_allclose(out, expected, atol=1e-14)


def test_htilde_range(particle_system, state4):
    ctx = StepContext(0.2, 0.1)
    g_n = oscillating_forcing()(state4)
    npt.assert_allclose(htilde(particle_system, ctx, state4, g_n, 0.2), np.zeros(4), atol=1e-15)
    with pytest.raises(ValueError):
        htilde(particle_system, ctx, state4, g_n, 0.35)


def _integrate(stepper, sys, nl, U0, T, dt):
    n = int(round(T / dt))
    ctx = StepContext(0.0, dt)
    U = np.array(U0, dtype=float)
    for _ in range(n):
        U = stepper(sys, nl, ctx, U)
        ctx = ctx.advanced()
    return U


def test_order_two_scheme_converges_at_second_order(particle_system):
    nl = oscillating_forcing()
    U0 = np.array([0.5, 0.2, -0.3, 0.4])
    T = 0.5
    ref = solve_ivp(lambda t, U: particle_system.evaluate(t) @ U + nl(U), (0.0, T), U0,
                    method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    steps = np.array([0.05, 0.025, 0.0125])
    errors = [np.linalg.norm(_integrate(step_nl_order2, particle_system, nl, U0, T, dt) - ref) for dt in steps]
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert 1.7 <= slope <= 2.3


def test_order_one_scheme_is_less_accurate(particle_system):
    nl = oscillating_forcing()
    U0 = np.array([0.5, 0.2, -0.3, 0.4])
    first = _integrate(step_nl_order1, particle_system, nl, U0, 0.5, 0.0125)
    second = _integrate(step_nl_order2, particle_system, nl, U0, 0.5, 0.0125)
    ref = solve_ivp(lambda t, U: particle_system.evaluate(t) @ U + nl(U), (0.0, 0.5), U0,
                    method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    assert np.linalg.norm(second - ref) < np.linalg.norm(first - ref)
