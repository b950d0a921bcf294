import cmath
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import numpy.testing as npt
import pytest

from services.errors import ProfileError
from services.osc_quadrature import (
    KernelCache,
    OscPoly,
    PeriodicProfile,
    configure_quadrature,
    definite_integral,
    exponential_kernels,
    get_kernel_cache,
    lemma_bounds,
    lemma_residuals,
    nested_integral,
    power_average,
    profile_as_oscpoly,
)
from services.reference_oracle import quadrature_oracle


@pytest.mark.parametrize("profile, first, second", [
    (PeriodicProfile.cosine(), 0.0, 0.5),
    (PeriodicProfile.one_plus_cosine(), 1.0, 1.5),
    (PeriodicProfile.two_plus_half_cos_squared(), 2.25, 2.25 ** 2 + 2 * 0.125 ** 2),
])
def test_power_average(profile, first, second):
    assert power_average(profile, 1) == pytest.approx(first, abs=1e-15)
    assert power_average(profile, 2) == pytest.approx(second, abs=1e-15)


def test_power_coeffs_shared_across_threads():
    profile = PeriodicProfile.two_plus_half_cos_squared()
    with ThreadPoolExecutor(max_workers=8) as executor:
        results = list(executor.map(profile.power_coeffs, [6] * 32))
    assert all(r is results[0] for r in results)
    s = 2 * math.pi * np.arange(64) / 64
    assert results[0][0].real == pytest.approx(np.mean((2.0 + 0.5 * np.cos(s) ** 2) ** 6), rel=1e-13)


def test_profile_rejects_complex_valued_coefficients():
    with pytest.raises(ProfileError):
        PeriodicProfile({1: 1.0})


def test_profile_from_function_reproduces_cosine():
    profile = PeriodicProfile.from_function(np.cos, cutoff=3)
    s = np.linspace(0.0, 2 * math.pi, 17)
    npt.assert_allclose(profile.evaluate(s), np.cos(s), atol=1e-12)


def test_scaled_profile_evaluates_to_multiple():
    profile = PeriodicProfile.one_plus_cosine().scaled(2.5)
    s = np.linspace(-3.0, 3.0, 11)
    npt.assert_allclose(profile.evaluate(s), 2.5 * (1.0 + np.cos(s)), atol=1e-13)


def test_antiderivative_inverts_derivative():
    p = OscPoly.from_terms(0.1, [(1.0, 2, 1), (0.5, 0, -3), (2.0, 1, 0), (0.25j, 1, 2)])
    t = np.linspace(0.0, 1.3, 9)
    npt.assert_allclose(p.antiderivative().derivative()(t), p(t), rtol=1e-11, atol=1e-11)


def test_product_matches_pointwise_product():
    eps = 0.3
    p = OscPoly.from_terms(eps, [(1.0, 1, 1), (2.0, 0, 0)])
    q = OscPoly.from_terms(eps, [(0.5, 0, -1), (1.0, 2, 2)])
    t = np.linspace(0.0, 2.0, 7)
    npt.assert_allclose((p * q)(t), p(t) * q(t), rtol=1e-13, atol=1e-13)


def test_shifted_evaluates_at_offset():
    p = OscPoly.from_terms(0.01, [(1.0, 1, 1), (3.0, 0, -2)])
    tau = np.linspace(0.0, 0.2, 5)
    npt.assert_allclose(p.shifted(0.37)(tau), p(0.37 + tau), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("epsilon", [1.0, 1e-3])
def test_nested_integral_of_constants(depth, epsilon):
    one = OscPoly.constant(1.0, epsilon)
    dt = 0.1
    value = nested_integral([one] * depth, 0.4, dt)
    assert value.real == pytest.approx(dt ** depth / math.factorial(depth), rel=1e-13)
    assert abs(value.imag) < 1e-15


@pytest.mark.parametrize("epsilon", [1.0, 0.1, 1e-3, 1e-5])
def test_single_exponential_matches_closed_form(epsilon):
    t_n, dt = 0.3, 0.1
    p = OscPoly.from_terms(epsilon, [(1.0, 0, 1)])
    expected = epsilon / 1j * (cmath.exp(1j * (t_n + dt) / epsilon) - cmath.exp(1j * t_n / epsilon))
    assert abs(nested_integral([p], t_n, dt) - expected) <= 1e-9 * max(abs(expected), dt * epsilon)


@pytest.mark.parametrize("epsilon", [0.5, 0.05, 0.01])
def test_nested_integral_matches_adaptive_quadrature(cosine, epsilon):
    t_n, dt = 0.3, 0.1
    theta = profile_as_oscpoly(cosine, 1, epsilon)
    theta2 = profile_as_oscpoly(cosine, 2, epsilon)
    closed = nested_integral([theta, theta2], t_n, dt).real
    reference = quadrature_oracle([lambda s: math.cos(s / epsilon), lambda s: math.cos(s / epsilon) ** 2],
                                  t_n, t_n + dt)
    assert closed == pytest.approx(reference, rel=1e-8, abs=1e-14)


def test_definite_integral_rejects_reversed_interval(cosine):
    with pytest.raises(ProfileError):
        definite_integral(profile_as_oscpoly(cosine, 1, 0.1), 1.0, 0.5)


def test_nested_integral_requires_same_epsilon():
    with pytest.raises(ProfileError):
        nested_integral([OscPoly.constant(1.0, 0.1), OscPoly.constant(1.0, 0.2)], 0.0, 0.1)


@pytest.mark.parametrize("epsilon", [0.5, 0.02])
def test_exponential_kernels_agree_with_nested_integrals(epsilon):
    modes = (-1, 0, 2)
    dt = 0.1
    kernels = exponential_kernels(modes, 2, epsilon, 2 * math.pi, dt)
    basis = [OscPoly.from_terms(epsilon, [(1.0, 0, k)]) for k in modes]
    for i, p in enumerate(basis):
        assert kernels[1][i] == pytest.approx(nested_integral([p], 0.0, dt), rel=1e-12, abs=1e-15)
        for j, q in enumerate(basis):
            assert kernels[2][i, j] == pytest.approx(nested_integral([p, q], 0.0, dt), rel=1e-11, abs=1e-15)


def test_kernel_cache_evicts_oldest_entry():
    cache = KernelCache(max_entries=2)
    cache.put("a", 1)
    cache.put("b", 2)
    cache.put("c", 3)
    assert len(cache) == 2
    assert cache.get("a") is None
    assert cache.get("c") == 3


def test_configure_quadrature_clears_kernel_cache():
    exponential_kernels((0, 1), 1, 0.1, 2 * math.pi, 0.1)
    assert len(get_kernel_cache()) > 0
    options = configure_quadrature(taylor_degree=30)
    assert options.taylor_degree == 30
    assert len(get_kernel_cache()) == 0


def test_taylor_and_exact_paths_agree(cosine):
    theta = profile_as_oscpoly(cosine, 1, 0.04)
    exact = nested_integral([theta, theta], 0.2, 0.1)
    configure_quadrature(taylor_threshold=10.0)
    expanded = nested_integral([theta, theta], 0.2, 0.1)
    assert expanded == pytest.approx(exact, rel=1e-10, abs=1e-15)


@pytest.mark.parametrize("epsilon", [0.1, 0.01, 0.001])
@pytest.mark.parametrize("t_n", [0.0, 0.37, 1.9])
def test_lemma_residuals_within_bounds(cosine, epsilon, t_n):
    dt = 0.1
    residuals = lemma_residuals(cosine, epsilon, t_n, dt)
    bounds = lemma_bounds(cosine, epsilon, dt)
    assert set(residuals) == {"id1", "id2", "id3", "id4", "id5"}
    for name, value in residuals.items():
        assert value <= bounds[name] * (1.0 + 1e-9) + 1e-15, name
