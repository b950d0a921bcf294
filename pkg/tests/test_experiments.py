import math

import numpy as np
import pytest

from cli.models import ExperimentConfig, ExperimentKind, GateRule, PicBlock, SchemeId
from cli.presets import get_presets
from config import Config
from services.errors import ConfigurationError, TooFewPeaksError
from services.experiments import (
    AVERAGED_SCHEMES,
    _reference_for,
    build_problem,
    classify_decay,
    dft_spectrum,
    evaluate_gates,
    find_peaks,
    fit_decay_rate,
    fit_loglog,
    integrate,
    momentum_drift,
    match_peaks,
    relative_drift,
    run_experiment,
    step_count,
)

OMEGA_R = 1.4156
GAMMA = -0.1533


def _damped_energy(rate, t_final=30.0, dt=0.01):
    t = np.arange(0.0, t_final + dt / 2, dt)
    return t, np.exp(2 * rate * t) * (np.cos(OMEGA_R * t) ** 2 + 1e-12)


def test_decay_rate_of_synthetic_damped_energy():
    t, energy = _damped_energy(GAMMA)
    fit = fit_decay_rate(t, energy)
    assert fit.rate == pytest.approx(GAMMA, abs=1e-3)
    assert fit.peaks >= 4
    assert np.all((fit.peak_times > 5.0) & (fit.peak_times < 30.0))


def test_decay_rate_of_constant_and_growing_series():
    t = np.linspace(0.0, 30.0, 301)
    assert fit_decay_rate(t, np.full_like(t, 2.0)).rate == pytest.approx(0.0, abs=1e-12)
    t, energy = _damped_energy(0.1)
    assert fit_decay_rate(t, energy).rate > 0.0


def test_decay_rate_needs_four_peaks():
    t, energy = _damped_energy(GAMMA)
    with pytest.raises(TooFewPeaksError):
        fit_decay_rate(t, energy, window=(5.0, 6.0))
    with pytest.raises(ValueError):
        fit_decay_rate(t, -energy)


def test_classify_decay():
    assert classify_decay(-0.15, -0.15) == "damping"
    assert classify_decay(-0.01, -0.15) == "disintegrated"


def test_dft_peak_of_cosine():
    dt, T = 0.01, 200.0
    t = np.arange(0.0, T, dt)
    omega, magnitude = dft_spectrum(np.cos(0.5 * t), dt)
    peaks = find_peaks(omega, magnitude)
    assert peaks[0][0] == pytest.approx(0.5, abs=2 * math.pi / T)
    (target, found, offset), = match_peaks(peaks, [0.5])
    assert offset == pytest.approx(abs(found - 0.5))
    assert match_peaks([], [0.5])[0][2] == math.inf


def test_fit_loglog_ignores_floor():
    x = np.array([0.1, 0.05, 0.025, 0.0125])
    y = 3.0 * x ** 2
    fit = fit_loglog(x, y)
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.residual < 1e-12
    floored = fit_loglog(x, np.array([1e-3, 1e-4, 1e-15, 1e-15]), floor=1e-13)
    assert floored.points == 2
    assert math.isnan(fit_loglog([0.1], [1.0]).slope)


def test_relative_drift():
    assert relative_drift([2.0, 2.2, 1.9]) == pytest.approx(0.1)
    assert relative_drift([0.0, 1e-3, -2e-3]) == pytest.approx(2e-3)


def test_evaluate_gates():
    rules = [GateRule(metric="a", lower=1.0, upper=2.0), GateRule(metric="b", upper=0.5),
             GateRule(metric="missing", lower=0.0), GateRule(metric="nan", lower=0.0)]
    results = evaluate_gates(rules, {"a": 1.5, "b": 0.7, "nan": math.nan}, {"a": 0.01})
    assert [g.passed for g in results] == [True, False, False, False]
    assert results[0].residual == 0.01


def test_gate_rule_needs_a_bound():
    with pytest.raises(ValueError):
        GateRule(metric="a")


def test_step_count():
    assert step_count(1.0, 0.25) == 4
    assert step_count(0.5, 0.1) == 5
    with pytest.raises(ConfigurationError):
        step_count(1.0, 0.3)


def test_linear_scheme_rejects_nonlinear_problem():
    cfg = ExperimentConfig(id="x", experiment="converge", scheme="midpoint_ua", potential="oscillating")
    problem = build_problem(cfg, 0.1)
    with pytest.raises(ConfigurationError):
        integrate(problem, SchemeId.MIDPOINT_UA, 0.1, 0.5)


def test_sav_trajectory_carries_log_r(confining_potential):
    cfg = ExperimentConfig(id="x", experiment="energy", scheme="sav_ua_choice1", potential="confining_oscillating")
    trajectory = integrate(build_problem(cfg, 0.1), SchemeId.SAV_UA_CHOICE1, 0.1, 1.0)
    assert trajectory.states.shape == (11, 4)
    assert trajectory.log_r[0] == pytest.approx(float(confining_potential.phi(np.array([1.0, 0.5]))))


def test_small_convergence_sweep():
    cfg = ExperimentConfig(
        id="conv", experiment="converge", scheme="midpoint_ua", compare=["midpoint_naive"],
        eps_list=[0.1, 0.01], dt_list=[0.05, 0.025, 0.0125], T=0.5,
        gates=[GateRule(metric="uniform_slope", lower=1.5, upper=2.5)],
    )
    outcome = run_experiment(cfg)
    errors = outcome.tables["errors"]
    assert len(errors) == 2 * 2 * 3
    assert set(outcome.metrics) >= {"uniform_slope", "min_per_eps_slope", "midpoint_naive.uniform_slope"}
    assert outcome.passed, outcome.gates
    fits = outcome.tables["fits"]
    assert set(fits["kind"]) == {"per_eps", "uniform"}


def test_degeneracy_gap_shrinks_with_epsilon():
    cfg = ExperimentConfig(id="deg", experiment="degeneracy", scheme="midpoint_ua",
                           compare=["averaged_midpoint"], eps_list=[1e-2, 1e-3, 1e-4], dt_list=[0.01], T=0.5)
    outcome = run_experiment(cfg)
    gaps = outcome.tables["degeneracy"]["gap"].values
    assert gaps[0] > gaps[2]
    assert outcome.metrics["gap_slope"] >= 0.7


def test_energy_audit_of_averaged_schemes():
    cfg = ExperimentConfig(
        id="energy", experiment="energy", scheme="averaged_midpoint", compare=["averaged_exp_taylor"],
        profile="one_plus_cosine", eps_list=[0.1], dt_list=[0.1], T=100.0,
    )
    outcome = run_experiment(cfg)
    assert outcome.metrics["h1_drift"] <= 1e-11
    assert outcome.metrics["h2_drift"] <= 1e-11
    assert outcome.metrics["averaged_exp_taylor.hbar_drift"] >= 1e-6
    assert list(outcome.tables["energy"].columns) == ["scheme", "t", "Hbar", "H1", "H2", "norm"]


def test_norm_is_preserved_for_skew_averaged_system():
    cfg = next(c for c in get_presets("energy") if c.id == "energy_norm_skew")
    averaged = build_problem(cfg, cfg.eps_list[0]).system.averaged()
    np.testing.assert_allclose(averaged, -averaged.T, atol=1e-15)
    outcome = run_experiment(cfg)
    assert outcome.metrics["norm_drift"] <= 1e-13
    assert outcome.passed, outcome.gates


def test_energy_audit_of_averaged_sav():
    cfg = ExperimentConfig(
        id="sav", experiment="energy", scheme="sav_averaged_taylor", compare=["sav_averaged_extrapolation"],
        potential="confining_oscillating", eps_list=[0.1], dt_list=[0.1], T=100.0,
        gates=[GateRule(metric="hbar_drift", upper=1e-11),
               GateRule(metric="sav_averaged_extrapolation.hbar_drift", upper=1e-11)],
    )
    assert run_experiment(cfg).passed


def test_spectrum_peaks_match_averaged_frequencies():
    cfg = ExperimentConfig(
        id="spec", experiment="spectrum", scheme="midpoint_ua", compare=["averaged_midpoint"],
        profile="one_plus_cosine", eps_list=[0.1], dt_list=[0.05], T=200.0,
        gates=[GateRule(metric="peak_offset_bins", upper=1.0)],
    )
    outcome = run_experiment(cfg)
    assert outcome.passed, outcome.gates
    expected = sorted(set(outcome.tables["peaks"]["expected"].round(4)))
    assert expected == pytest.approx([0.2247, 2.2247], abs=1e-4)


def test_confinement_tables():
    cfg = ExperimentConfig(
        id="conf", experiment="confine", scheme="sav_ua_choice2", compare=["sav_averaged_taylor"],
        potential="confining_oscillating", initial_state=[0.1, 0.0, 1.0, 0.5],
        B_list=[0.5, 5.0], eps_list=[0.1, 0.001], dt_list=[0.1], T=5.0,
    )
    outcome = run_experiment(cfg)
    extents = outcome.tables["extents"]
    assert len(extents) == 4
    assert np.all(np.isfinite(extents["max_extent"]))
    assert set(outcome.metrics) == {"monotone_eps_0.1", "monotone_eps_0.001", "monotone_in_B", "eps_ordering"}
    assert len(outcome.tables["traces"]) == 4 * 51


def test_oracle_self_check():
    cfg = ExperimentConfig(id="oracle", experiment="oracle", eps_list=[1.0, 0.1, 1e-3],
                           dt_list=[0.1, 0.05], k_list=[0.5])
    outcome = run_experiment(cfg)
    assert outcome.metrics["quadrature_max_rel_err"] <= 1e-8
    assert outcome.metrics["lemma_bound_ratio"] <= 1.0
    assert outcome.metrics["dispersion_max_residual"] <= 1e-8
    assert outcome.metrics["gamma_k0.5"] == pytest.approx(GAMMA, abs=1e-3)
    assert set(outcome.tables["quadrature"]["eps"]) == {1.0, 0.1}


@pytest.mark.slow
def test_landau_damping_rate():
    cfg = ExperimentConfig(
        id="landau", experiment="landau", scheme="pic", B=0.0,
        pic=PicBlock(n1=64, n2=4, particles_per_cell=50, dt=0.05, t_final=15.0, xi1=0.1, k1=0.5, k2=0.5,
                     fit_window=(2.0, 15.0)),
        gates=[GateRule(metric="rate_gap", upper=0.2)],
    )
    outcome = run_experiment(cfg)
    assert outcome.passed, outcome.gates
    assert outcome.tables["landau_rates"]["classification"].iloc[0] == "damping"
    assert "momentum_drift" in outcome.metrics
    assert {"momentum1", "momentum2"} <= set(outcome.tables["landau_energy"].columns)


@pytest.mark.slow
def test_full_scale_references_fit_budget_at_smallest_eps():
    ref_cfg = Config().reference_config()
    for cfg in get_presets("converge", paper_scale=True):
        if cfg.experiment != ExperimentKind.CONVERGE:
            continue
        problem = build_problem(cfg, min(cfg.eps_list))
        for scheme in [cfg.scheme, *cfg.compare]:
            solution = _reference_for(problem, cfg.T, ref_cfg, averaged=scheme in AVERAGED_SCHEMES)
            assert np.all(np.isfinite(solution.final)), cfg.id
            assert solution.self_convergence <= ref_cfg.self_convergence_tol


def test_momentum_drift_is_largest_step_change():
    momenta = np.array([[0.0, 1.0], [1e-3, 1.0], [1e-3, 0.9]])
    assert momentum_drift(momenta) == pytest.approx(0.1)
    assert momentum_drift(momenta[:1]) == 0.0
