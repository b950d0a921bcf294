from functools import partial

import numpy as np
import numpy.testing as npt
import pytest

from services.linear_ua import StepContext, step_midpoint_particles
from services.particle_model import scaled_averages
from services.sav_schemes import (
    BbarMode,
    BMode,
    PotentialField,
    advance,
    check_derivatives,
    hamiltonian_bar,
    init_sav,
    step_sav_averaged,
    step_sav_ua,
)

POINTS = np.array([[0.3, -0.7], [1.2, 0.4], [-1.5, 2.0], [0.0, 0.0]])


@pytest.mark.parametrize("name", ["quadratic", "oscillating", "confining_oscillating"])
def test_potential_derivatives(name):
    grad_err, hess_err = check_derivatives(getattr(PotentialField, name)(), POINTS)
    assert grad_err < 1e-7
    assert hess_err < 1e-7


def test_confining_potential_is_bounded_below(confining_potential):
    grid = np.stack(np.meshgrid(np.linspace(-3, 3, 61), np.linspace(-3, 3, 61)), axis=-1)
    assert np.min(confining_potential.phi(grid)) >= -1.0


def test_init_sav_stores_log_of_auxiliary_variable(oscillating_potential):
    s = init_sav([0.3, -0.7], [1.0, 0.0], oscillating_potential)
    assert float(s.log_r) == pytest.approx(float(oscillating_potential.phi(np.array([0.3, -0.7]))))
    assert s.r == pytest.approx(np.exp(s.log_r))
    assert s.x_prev is None


@pytest.mark.parametrize("mode", [BbarMode.TAYLOR, BbarMode.EXTRAPOLATION])
def test_averaged_sav_conserves_modified_energy(one_plus_cosine, confining_potential, mode):
    a, c = scaled_averages(one_plus_cosine, 1.0)
    s = init_sav([0.1, 0.0], [1.0, 0.5], confining_potential)
    h0 = float(hamiltonian_bar(s, a, c))
    states = advance(s, partial(step_sav_averaged, field=confining_potential, theta_avg=a, theta2_avg=c,
                                bbar_mode=mode), StepContext(0.0, 0.1), 1000)
    assert len(states) == 1001
    drift = max(abs(float(hamiltonian_bar(st, a, c)) - h0) for st in states)
    assert drift <= 1e-11 * max(1.0, abs(h0))


def test_linear_potential_makes_closures_coincide(one_plus_cosine):
    field = PotentialField.linear([0.5, -1.0])
    a, c = scaled_averages(one_plus_cosine, 1.0)
    ctx = StepContext(0.0, 0.1)
    s = init_sav([0.1, 0.2], [0.3, 0.4], field)
    s = step_sav_averaged(s, field, a, c, ctx)
    taylor = step_sav_averaged(s, field, a, c, ctx.advanced(), BbarMode.TAYLOR)
    extrapolated = step_sav_averaged(s, field, a, c, ctx.advanced(), BbarMode.EXTRAPOLATION)
    npt.assert_allclose(extrapolated.as_vector(), taylor.as_vector(), atol=1e-14)

    choice1 = step_sav_ua(s, one_plus_cosine, 1.0, field, ctx.advanced(), 0.01, BMode.CHOICE1)
    choice2 = step_sav_ua(s, one_plus_cosine, 1.0, field, ctx.advanced(), 0.01, BMode.CHOICE2)
    npt.assert_allclose(choice1.as_vector(), choice2.as_vector(), atol=1e-14)


def test_zero_potential_reduces_to_particle_midpoint(cosine):
    field = PotentialField.zero()
    s = init_sav([1.0, 0.5], [-0.5, 1.0], field)
    ctx = StepContext(0.3, 0.1)
    out = step_sav_ua(s, cosine, 1.0, field, ctx, 0.05)
    expected = step_midpoint_particles(cosine, 1.0, ctx, np.array([1.0, 0.5, -0.5, 1.0]), 0.05)
    npt.assert_allclose(out.as_vector(), expected, atol=1e-14)
    assert float(out.log_r) == 0.0


def test_auxiliary_variable_tracks_potential(one_plus_cosine, oscillating_potential):
    s = init_sav([0.2, -0.1], [0.1, 0.3], oscillating_potential)
    states = advance(s, partial(step_sav_ua, profile=one_plus_cosine, B_amp=1.0, field=oscillating_potential,
                                epsilon=0.01), StepContext(0.0, 0.01), 50)
    final = states[-1]
    assert float(final.log_r) == pytest.approx(float(oscillating_potential.phi(final.x)), abs=1e-3)
    npt.assert_array_equal(final.x_prev, states[-2].x)


def test_batched_sav_step_matches_single_particles(one_plus_cosine, oscillating_potential):
    x = np.array([[0.1, 0.2], [-0.3, 0.4]])
    q = np.array([[0.5, 0.0], [0.0, -0.5]])
    ctx = StepContext(0.0, 0.05)
    batch = step_sav_ua(init_sav(x, q, oscillating_potential), one_plus_cosine, 1.0, oscillating_potential, ctx, 0.1)
    for i in range(2):
        single = step_sav_ua(init_sav(x[i], q[i], oscillating_potential), one_plus_cosine, 1.0,
                             oscillating_potential, ctx, 0.1)
        npt.assert_allclose(batch.as_vector()[i], single.as_vector(), atol=1e-14)
        assert float(batch.log_r[i]) == pytest.approx(float(single.log_r), abs=1e-14)
