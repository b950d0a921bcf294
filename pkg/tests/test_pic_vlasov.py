import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import numpy.testing as npt
import pytest

from services.errors import ConfigurationError
from services.linear_ua import StepContext
from services.osc_quadrature import PeriodicProfile
from services.pic_vlasov import (
    FieldState,
    Grid2D,
    InitCondition,
    ParticleEnsemble,
    PicSettings,
    PicSimulation,
    PusherMode,
    bspline_weights,
    compute_fields,
    deposit_density,
    electric_energy,
    interpolate_field,
    pic_step,
    sample_initial,
    solve_poisson,
)


@pytest.fixture
def grid():
    return Grid2D.from_wavenumbers(32, 8, 0.5, 0.5)


@pytest.fixture
def ic():
    return InitCondition(xi1=0.5, xi2=0.0, k1=0.5, k2=0.5)


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_bspline_partition_of_unity(m):
    xp = np.random.default_rng(1).uniform(0.0, 10.0, 200)
    base, weights = bspline_weights(xp, 0.37, m)
    assert weights.shape == (200, m + 1)
    npt.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-14)
    assert np.all(weights >= 0.0)
    assert base.dtype == np.int64


def test_bspline_order_out_of_range():
    with pytest.raises(ConfigurationError):
        bspline_weights([0.1], 0.5, 4)


@pytest.mark.parametrize("n1, n2", [(6, 8), (32, 2), (32, 12)])
def test_grid_requires_powers_of_two(n1, n2):
    with pytest.raises(ConfigurationError):
        Grid2D(n1, n2, 1.0, 1.0)


@pytest.mark.parametrize("xi1, xi2", [(1.0, 0.0), (0.0, -1.2)])
def test_init_condition_rejects_large_perturbation(xi1, xi2):
    with pytest.raises(ConfigurationError):
        InitCondition(xi1, xi2, 0.5, 0.5)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_uniform_particles_deposit_unit_density(grid, m):
    x1, x2 = grid.nodes()
    positions = np.column_stack([x1.ravel(), x2.ravel()])
    ens = ParticleEnsemble(positions, np.zeros_like(positions), grid.L1 * grid.L2 / positions.shape[0])
    npt.assert_allclose(deposit_density(ens, grid, m), 1.0, atol=1e-12)


def test_deposit_conserves_total_charge(grid):
    rng = np.random.default_rng(7)
    positions = rng.uniform(0.0, 1.0, (1000, 2)) * grid.lengths
    ens = ParticleEnsemble(positions, np.zeros_like(positions), 0.25)
    rho = deposit_density(ens, grid, 2, chunk_size=128)
    assert rho.sum() * grid.cell_area == pytest.approx(0.25 * 1000, rel=1e-12)


def test_poisson_solution_for_cosine_density(grid):
    x1, _ = grid.nodes()
    a, k = 0.3, 0.5
    fields = solve_poisson(1.0 + a * np.cos(k * x1), grid)
    npt.assert_allclose(fields.E[0], (a / k) * np.sin(k * x1), atol=1e-12)
    npt.assert_allclose(fields.E[1], 0.0, atol=1e-12)
    npt.assert_allclose(fields.phi, (a / k ** 2) * np.cos(k * x1), atol=1e-12)
    npt.assert_allclose(fields.grad_E[0, 0], a * np.cos(k * x1), atol=1e-12)
    npt.assert_allclose(fields.grad_E[1, 1], 0.0, atol=1e-12)


def test_electric_energy_of_sine_field(grid):
    x1, _ = grid.nodes()
    E = np.stack([np.sin(0.5 * x1), np.zeros_like(x1)])
    fields = FieldState(rho=np.ones_like(x1), phi=np.zeros_like(x1), E=E, grad_E=np.zeros((2,) + E.shape))
    assert electric_energy(fields, grid) == pytest.approx(grid.L1 * grid.L2 / 2, rel=1e-12)


def test_interpolation_of_constant_and_vector_fields(grid):
    positions = np.random.default_rng(3).uniform(0.0, 1.0, (50, 2)) * grid.lengths
    npt.assert_allclose(interpolate_field(np.full((32, 8), 2.5), positions, grid), 2.5, atol=1e-13)
    vector = np.stack([np.ones((32, 8)), -np.ones((32, 8))])
    out = interpolate_field(vector, positions, grid)
    assert out.shape == (50, 2)
    npt.assert_allclose(out, np.tile([1.0, -1.0], (50, 1)), atol=1e-13)
    assert interpolate_field(np.zeros((2, 2, 32, 8)), positions, grid).shape == (50, 2, 2)


def test_sampling_statistics(ic):
    ens = sample_initial(ic, 20000, seed=0)
    L1 = 2 * math.pi / ic.k1
    assert np.all((ens.positions >= 0.0) & (ens.positions < L1))
    assert ens.weight == pytest.approx(L1 * L1 / 20000)
    assert np.mean(np.cos(ic.k1 * ens.positions[:, 0])) == pytest.approx(ic.xi1 / 2, abs=5e-3)
    assert np.mean(np.cos(ic.k2 * ens.positions[:, 1])) == pytest.approx(0.0, abs=5e-3)
    npt.assert_allclose(ens.momenta.mean(axis=0), 0.0, atol=2e-2)
    npt.assert_allclose(ens.momenta.var(axis=0), 1.0, atol=5e-2)


def test_sampling_is_reproducible_for_a_seed(ic):
    first = sample_initial(ic, 500, seed=11)
    second = sample_initial(ic, 500, seed=11)
    other = sample_initial(ic, 500, seed=12)
    npt.assert_array_equal(first.positions, second.positions)
    npt.assert_array_equal(first.momenta, second.momenta)
    assert not np.array_equal(first.positions, other.positions)


def test_sampling_converts_velocity_to_guiding_momentum(ic):
    profile = PeriodicProfile.one_plus_cosine()
    plain = sample_initial(ic, 100, seed=5)
    magnetized = sample_initial(ic, 100, seed=5, profile=profile, B_amp=2.0, epsilon=0.1)
    x = plain.positions
    npt.assert_allclose(magnetized.momenta, plain.momenta - 2.0 * np.column_stack([x[:, 1], -x[:, 0]]),
                        atol=1e-12)


def test_initial_field_energy_matches_perturbation():
    ic = InitCondition(xi1=0.1, xi2=0.0, k1=0.5, k2=0.5)
    grid = Grid2D.from_wavenumbers(32, 4, ic.k1, ic.k2)
    ens = sample_initial(ic, 100 * 32 * 4, seed=0)
    energy = electric_energy(compute_fields(ens, grid), grid)
    expected = (ic.xi1 / ic.k1) ** 2 * grid.L1 * grid.L2 / 2
    assert energy == pytest.approx(expected, rel=0.1)


def test_pic_step_wraps_positions(grid, ic):
    ens = sample_initial(ic, 256, seed=2, profile=PeriodicProfile.cosine(), B_amp=1.0, epsilon=0.1)
    ens.momenta[:] = 50.0
    fields = compute_fields(ens, grid)
    pushed, new_fields = pic_step(ens, fields, grid, PeriodicProfile.cosine(), 1.0, 0.1, StepContext(0.0, 0.1))
    assert np.all((pushed.positions >= 0.0) & (pushed.positions < grid.lengths))
    assert new_fields.rho.sum() * grid.cell_area == pytest.approx(ens.weight * 256, rel=1e-12)


def _small_settings(**overrides):
    params = dict(ic=InitCondition(0.1, 0.0, 0.5, 0.5), n1=16, n2=4, particles_per_cell=20, dt=0.05,
                  t_final=0.5, chunk_size=100)
    params.update(overrides)
    return PicSettings(**params)


def test_threaded_run_matches_serial_run():
    serial = PicSimulation(_small_settings()).run()
    with ThreadPoolExecutor(max_workers=4) as executor:
        threaded = PicSimulation(_small_settings(), executor=executor).run()
    npt.assert_array_equal(serial.energies, threaded.energies)
    assert serial.times[-1] == pytest.approx(0.5)
    assert serial.energies.shape == (11,)


@pytest.mark.parametrize("pusher", [PusherMode.NL_ORDER1, PusherMode.SAV_UA])
def test_alternative_pushers_run(pusher):
    result = PicSimulation(_small_settings(pusher=pusher, B_amp=1.0, epsilon=0.1, snapshot_every=5)).run()
    assert np.all(np.isfinite(result.energies))
    assert [t for t, _ in result.snapshots] == pytest.approx([0.0, 0.25, 0.5])
    assert result.snapshots[-1][1].shape == (16 * 4 * 20, 4)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_deposit_is_adjoint_of_interpolation(grid, m):
    rng = np.random.default_rng(11)
    values = rng.standard_normal((grid.n1, grid.n2))
    positions = rng.uniform(0.0, 1.0, (500, 2)) * grid.lengths
    ens = ParticleEnsemble(positions, np.zeros_like(positions), 0.3)
    on_grid = np.sum(values * deposit_density(ens, grid, m)) * grid.cell_area
    on_particles = ens.weight * np.sum(interpolate_field(values, positions, grid, m))
    assert on_grid == pytest.approx(on_particles, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_momentum_is_conserved_without_magnetic_field(m):
    result = PicSimulation(_small_settings(pusher=PusherMode.NL_ORDER1, spline_order=m)).run()
    assert result.momenta.shape == (11, 2)
    assert np.max(np.abs(np.diff(result.momenta, axis=0))) <= 1e-10
