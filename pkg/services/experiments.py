"""
实验服务
收敛阶扫描、ε→0 退化、能量审计、频谱、约束性、朗道阻尼与预言机自检
每个实验返回结果表、指标（含拟合残差）以及门限判定
"""
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.fft
from loguru import logger

from cli.models import (
    ExperimentConfig,
    ExperimentKind,
    GateResult,
    GateRule,
    LINEAR_SCHEMES,
    PotentialId,
    ProfileId,
    SchemeId,
    SystemId,
)
from config import Config, get_config
from services.errors import ConfigurationError, TooFewPeaksError, UapicError
from services.linear_ua import (
    BlockReading,
    LinearOscSystem,
    StepContext,
    step_averaged_exp_taylor,
    step_averaged_midpoint,
    step_explicit,
    step_midpoint_naive,
    step_midpoint_particles,
    step_midpoint_ua,
)
from services.nonlinear_ua import (
    NonlinearTerm,
    from_potential,
    oscillating_forcing,
    step_nl_order1,
    step_nl_order2,
    zero,
)
from services.osc_quadrature import (
    OscPoly,
    PeriodicProfile,
    lemma_bounds,
    lemma_residuals,
    nested_integral,
    profile_as_oscpoly,
)
from services.particle_model import (
    GuidingState,
    averaged_frequencies,
    build_A,
    hamiltonians,
    scaled_averages,
)
from services.pic_vlasov import InitCondition, PicSettings, PicSimulation, PusherMode
from services.reference_oracle import (
    ReferenceConfig,
    dispersion_function,
    landau_dispersion_rate,
    quadrature_oracle,
    reference_solve,
)
from services.sav_schemes import (
    BbarMode,
    BMode,
    PotentialField,
    SavState,
    hamiltonian_bar,
    init_sav,
    sav_coefficients,
    step_sav_averaged,
    step_sav_ua,
)

PROFILES: Dict[ProfileId, Callable[[], PeriodicProfile]] = {
    ProfileId.COSINE: PeriodicProfile.cosine,
    ProfileId.ONE_PLUS_COSINE: PeriodicProfile.one_plus_cosine,
    ProfileId.TWO_PLUS_HALF_COS_SQUARED: PeriodicProfile.two_plus_half_cos_squared,
}

POTENTIALS: Dict[PotentialId, Callable[[], PotentialField]] = {
    PotentialId.NONE: PotentialField.zero,
    PotentialId.QUADRATIC: PotentialField.quadratic,
    PotentialId.OSCILLATING: PotentialField.oscillating,
    PotentialId.CONFINING_OSCILLATING: PotentialField.confining_oscillating,
}

EXPLICIT_ORDERS = {
    SchemeId.EXPLICIT1: 1,
    SchemeId.EXPLICIT2: 2,
    SchemeId.EXPLICIT3: 3,
    SchemeId.EXPLICIT4: 4,
}

AVERAGED_SCHEMES = {
    SchemeId.AVERAGED_MIDPOINT,
    SchemeId.AVERAGED_EXP_TAYLOR,
    SchemeId.SAV_AVERAGED_TAYLOR,
    SchemeId.SAV_AVERAGED_EXTRAPOLATION,
}

LANDAU_CLASS_FACTOR = 0.5
LEMMA_PHASES = 8


@dataclass
class ExperimentOutcome:
    """实验结果：CSV 表、指标、拟合残差与门限判定"""
    tables: Dict[str, pd.DataFrame]
    metrics: Dict[str, float]
    residuals: Dict[str, float] = field(default_factory=dict)
    gates: List[GateResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)


@dataclass
class SlopeFit:
    """对数-对数最小二乘拟合"""
    slope: float
    residual: float
    points: int


@dataclass
class DecayFit:
    """能量峰包络拟合：rate = 斜率 × factor"""
    rate: float
    residual: float
    peak_times: np.ndarray
    peak_values: np.ndarray

    @property
    def peaks(self) -> int:
        return len(self.peak_times)


@dataclass
class Trajectory:
    """均匀时间网格上的状态序列；SAV 格式附带 log r"""
    times: np.ndarray
    states: np.ndarray
    log_r: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class OdeProblem:
    """U̇ = A(t/ε)U + g(U) 的一个实例"""
    profile: PeriodicProfile
    B_amp: float
    epsilon: float
    system: LinearOscSystem
    potential: PotentialField
    nonlinear: Optional[NonlinearTerm]
    U0: np.ndarray
    reading: BlockReading = BlockReading.PROOF

    @property
    def averages(self) -> Tuple[float, float]:
        return scaled_averages(self.profile, self.B_amp, normalized=True)


# ---------------------------------------------------------------------------
# 构造
# ---------------------------------------------------------------------------

def build_problem(cfg: ExperimentConfig, epsilon: float, B_amp: Optional[float] = None) -> OdeProblem:
    B_amp = cfg.B if B_amp is None else B_amp
    profile = PROFILES[cfg.profile]()
    if cfg.system == SystemId.SCALAR:
        system = LinearOscSystem({1: np.array([[1.0]])}, profile, epsilon)
    else:
        system = build_A(profile, B_amp, normalized=True, epsilon=epsilon)
    potential = POTENTIALS[cfg.potential]()
    if cfg.potential == PotentialId.NONE:
        nonlinear = None
    elif cfg.potential == PotentialId.OSCILLATING:
        nonlinear = oscillating_forcing()
    else:
        nonlinear = from_potential(potential)
    return OdeProblem(profile=profile, B_amp=B_amp, epsilon=epsilon, system=system, potential=potential,
                      nonlinear=nonlinear, U0=np.asarray(cfg.initial_state, dtype=float),
                      reading=BlockReading(cfg.reading))


def step_count(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ConfigurationError(f"T={T} 不是 Δt={dt} 的整数倍")
    return n


def _linear_stepper(problem: OdeProblem, scheme: SchemeId, dt: float):
    system = problem.system
    if scheme in EXPLICIT_ORDERS:
        order = EXPLICIT_ORDERS[scheme]
        return lambda n, U: step_explicit(system, StepContext(n * dt, dt, order), U)
    if scheme == SchemeId.MIDPOINT_NAIVE:
        return lambda n, U: step_midpoint_naive(system, StepContext(n * dt, dt), U)
    if scheme == SchemeId.MIDPOINT_UA:
        return lambda n, U: step_midpoint_ua(system, StepContext(n * dt, dt), U)
    if scheme == SchemeId.MIDPOINT_BLOCKS:
        return lambda n, U: step_midpoint_particles(problem.profile, problem.B_amp, StepContext(n * dt, dt), U,
                                                    problem.epsilon, problem.reading)
    if scheme == SchemeId.AVERAGED_MIDPOINT:
        return lambda n, U: step_averaged_midpoint(system, StepContext(n * dt, dt), U)
    if scheme == SchemeId.AVERAGED_EXP_TAYLOR:
        return lambda n, U: step_averaged_exp_taylor(system, StepContext(n * dt, dt, 2), U)
    if scheme in (SchemeId.NL_ORDER1, SchemeId.NL_ORDER2):
        nl = problem.nonlinear or zero(system.dim)
        stepper = step_nl_order1 if scheme == SchemeId.NL_ORDER1 else step_nl_order2
        return lambda n, U: stepper(system, nl, StepContext(n * dt, dt, 2), U)
    raise ConfigurationError(f"格式 {scheme.value} 不是状态向量格式")


def _sav_trajectory(problem: OdeProblem, scheme: SchemeId, dt: float, n_steps: int) -> Trajectory:
    field_ = problem.potential
    U0 = problem.U0
    s = init_sav(U0[:2], U0[2:4], field_)
    theta_avg, theta2_avg = problem.averages
    states = [s.as_vector()]
    log_r = [float(s.log_r)]
    for n in range(n_steps):
        ctx = StepContext(n * dt, dt, 2)
        if scheme == SchemeId.SAV_AVERAGED_TAYLOR:
            s = step_sav_averaged(s, field_, theta_avg, theta2_avg, ctx, BbarMode.TAYLOR)
        elif scheme == SchemeId.SAV_AVERAGED_EXTRAPOLATION:
            s = step_sav_averaged(s, field_, theta_avg, theta2_avg, ctx, BbarMode.EXTRAPOLATION)
        else:
            coefficients = problem.system.cached(
                ("sav", problem.system.phase_key(ctx.t_n), dt, problem.reading.value),
                lambda: sav_coefficients(problem.profile, problem.B_amp, ctx, problem.epsilon, problem.reading),
            )
            b_mode = BMode.CHOICE1 if scheme == SchemeId.SAV_UA_CHOICE1 else BMode.CHOICE2
            s = step_sav_ua(s, problem.profile, problem.B_amp, field_, ctx, problem.epsilon, b_mode,
                            problem.reading, coefficients=coefficients)
        states.append(s.as_vector())
        log_r.append(float(s.log_r))
    return Trajectory(times=dt * np.arange(n_steps + 1), states=np.array(states), log_r=np.array(log_r))


def integrate(problem: OdeProblem, scheme: SchemeId, dt: float, T: float) -> Trajectory:
    """以给定格式从 U₀ 推进到 T，记录整条轨迹"""
    n_steps = step_count(T, dt)
    if scheme.value.startswith("sav_"):
        if problem.system.dim != 4:
            raise ConfigurationError("SAV 格式只适用于带电粒子系统")
        return _sav_trajectory(problem, scheme, dt, n_steps)
    if scheme in LINEAR_SCHEMES and problem.nonlinear is not None:
        raise ConfigurationError(f"线性格式 {scheme.value} 不能处理非线性项 {problem.nonlinear.name}")
    stepper = _linear_stepper(problem, scheme, dt)
    U = problem.U0.copy()
    states = [U]
    for n in range(n_steps):
        U = stepper(n, U)
        states.append(U)
    return Trajectory(times=dt * np.arange(n_steps + 1), states=np.array(states))


# ---------------------------------------------------------------------------
# 拟合与判定
# ---------------------------------------------------------------------------

def fit_loglog(x: Sequence[float], y: Sequence[float], floor: float = 0.0) -> SlopeFit:
    """log y 对 log x 的最小二乘斜率；残差为对数残差的均方根"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = np.isfinite(y) & (y > floor) & (x > 0)
    if mask.sum() < 2:
        return SlopeFit(slope=math.nan, residual=math.nan, points=int(mask.sum()))
    lx, ly = np.log(x[mask]), np.log(y[mask])
    coeffs = np.polyfit(lx, ly, 1)
    residual = float(np.sqrt(np.mean((np.polyval(coeffs, lx) - ly) ** 2)))
    return SlopeFit(slope=float(coeffs[0]), residual=residual, points=int(mask.sum()))


def relative_drift(series: Sequence[float]) -> float:
    """max|H(t) − H(0)| / |H(0)|；H(0) = 0 时取绝对漂移"""
    series = np.asarray(series, dtype=float)
    scale = abs(series[0]) if series[0] != 0 else 1.0
    return float(np.max(np.abs(series - series[0])) / scale)


def evaluate_gates(rules: Sequence[GateRule], metrics: Dict[str, float],
                   residuals: Optional[Dict[str, float]] = None) -> List[GateResult]:
    """lower ≤ value ≤ upper；缺失或非有限的指标判为未通过"""
    residuals = residuals or {}
    results = []
    for rule in rules:
        value = metrics.get(rule.metric, math.nan)
        passed = math.isfinite(value)
        if passed and rule.lower is not None:
            passed = value >= rule.lower
        if passed and rule.upper is not None:
            passed = value <= rule.upper
        results.append(GateResult(name=rule.metric, value=value, residual=residuals.get(rule.metric),
                                  lower=rule.lower, upper=rule.upper, passed=passed))
    return results


def _metric(scheme: SchemeId, primary: SchemeId, name: str) -> str:
    return name if scheme == primary else f"{scheme.value}.{name}"


def _map_ordered(func, items, executor: Optional[Executor]):
    """按提交顺序收集结果"""
    items = list(items)
    if executor is None:
        return [func(item) for item in items]
    futures = [executor.submit(func, item) for item in items]
    return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# 收敛阶扫描
# ---------------------------------------------------------------------------

def _reference_for(problem: OdeProblem, T: float, ref_cfg: ReferenceConfig, averaged: bool):
    if averaged:
        avg_system = LinearOscSystem({0: problem.system.averaged()}, problem.profile, problem.epsilon)
        return reference_solve(avg_system, problem.U0, T, ref_cfg, nonlinear=problem.nonlinear)
    return reference_solve(problem.system, problem.U0, T, ref_cfg, nonlinear=problem.nonlinear)


def run_convergence(cfg: ExperimentConfig, app_config: Optional[Config] = None,
                    executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    """
    每个 ε 先求参考解，再对所有 Δt 计算终点 L² 误差
    报告每个 ε 的斜率以及 max-over-ε 误差包络的一致斜率
    """
    log = log or logger
    app_config = app_config or get_config()
    ref_cfg = app_config.reference_config()
    schemes = [cfg.scheme, *cfg.compare]
    log.info(f"收敛阶扫描开始: {cfg.id}, 格式={[s.value for s in schemes]}, "
             f"ε 数={len(cfg.eps_list)}, Δt 数={len(cfg.dt_list)}")

    def sweep(epsilon: float) -> List[dict]:
        problem = build_problem(cfg, epsilon)
        references = {}
        rows = []
        for scheme in schemes:
            averaged = scheme in AVERAGED_SCHEMES
            if averaged not in references:
                references[averaged] = _reference_for(problem, cfg.T, ref_cfg, averaged).final
            exact = references[averaged]
            for dt in cfg.dt_list:
                final = integrate(problem, scheme, dt, cfg.T).final
                diff = final - exact
                rows.append({
                    "scheme": scheme.value,
                    "eps": epsilon,
                    "dt": dt,
                    "err": float(np.linalg.norm(diff)),
                    "err_x": float(np.linalg.norm(diff[:2])) if diff.size == 4 else math.nan,
                    "err_q": float(np.linalg.norm(diff[2:4])) if diff.size == 4 else math.nan,
                })
        log.debug(f"ε={epsilon:g} 扫描完成")
        return rows

    rows = [row for chunk in _map_ordered(sweep, cfg.eps_list, executor) for row in chunk]
    errors = pd.DataFrame(rows)
    fits = []
    metrics: Dict[str, float] = {}
    residuals: Dict[str, float] = {}
    slopes = np.full(len(errors), math.nan)
    for scheme in schemes:
        subset = errors[errors["scheme"] == scheme.value]
        per_eps = []
        for epsilon in cfg.eps_list:
            part = subset[subset["eps"] == epsilon]
            fit = fit_loglog(part["dt"], part["err"], cfg.fit_floor)
            slopes[part.index] = fit.slope
            per_eps.append(fit.slope)
            fits.append({"scheme": scheme.value, "kind": "per_eps", "eps": epsilon, "slope": fit.slope,
                         "residual": fit.residual, "points": fit.points})
        envelope = subset.groupby("dt", sort=True)["err"].max()
        uniform = fit_loglog(envelope.index.values, envelope.values, cfg.fit_floor)
        fits.append({"scheme": scheme.value, "kind": "uniform", "eps": math.nan, "slope": uniform.slope,
                     "residual": uniform.residual, "points": uniform.points})
        name = _metric(scheme, cfg.scheme, "uniform_slope")
        metrics[name] = uniform.slope
        residuals[name] = uniform.residual
        finite = [s for s in per_eps if math.isfinite(s)]
        metrics[_metric(scheme, cfg.scheme, "min_per_eps_slope")] = min(finite) if finite else math.nan
        log.info(f"格式 {scheme.value}: 一致斜率={uniform.slope:.3f} (残差 {uniform.residual:.2e})")
    errors["slope"] = slopes
    return ExperimentOutcome(tables={"errors": errors, "fits": pd.DataFrame(fits)},
                             metrics=metrics, residuals=residuals)


def run_degeneracy(cfg: ExperimentConfig, app_config: Optional[Config] = None,
                   executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    """固定 Δt，UA 格式与平均格式在 T 时刻的差随 ε 的衰减"""
    log = log or logger
    dt = cfg.dt_list[0]
    companion = cfg.compare[0] if cfg.compare else SchemeId.AVERAGED_MIDPOINT
    log.info(f"退化检验开始: {cfg.id}, {cfg.scheme.value} 对 {companion.value}, Δt={dt}")

    def gap(epsilon: float) -> dict:
        problem = build_problem(cfg, epsilon)
        ua = integrate(problem, cfg.scheme, dt, cfg.T).final
        averaged = integrate(problem, companion, dt, cfg.T).final
        return {"scheme": cfg.scheme.value, "eps": epsilon, "dt": dt, "gap": float(np.linalg.norm(ua - averaged))}

    table = pd.DataFrame(_map_ordered(gap, cfg.eps_list, executor))
    fit = fit_loglog(table["eps"], table["gap"], cfg.fit_floor)
    log.info(f"退化斜率={fit.slope:.3f} (残差 {fit.residual:.2e})")
    return ExperimentOutcome(tables={"degeneracy": table},
                             metrics={"gap_slope": fit.slope, "max_gap": float(table["gap"].max())},
                             residuals={"gap_slope": fit.residual})


# ---------------------------------------------------------------------------
# 能量审计
# ---------------------------------------------------------------------------

def energy_series(problem: OdeProblem, trajectory: Trajectory) -> pd.DataFrame:
    """H̄（SAV 时含 log r，否则含 φ）、H₁、H₂ 与 |U|₂ 的时间序列"""
    theta_avg, theta2_avg = problem.averages
    states = trajectory.states
    guiding = GuidingState.from_vector(states)
    if trajectory.log_r is not None:
        s = SavState(x=guiding.x, q=guiding.q, log_r=trajectory.log_r)
        hbar = hamiltonian_bar(s, theta_avg, theta2_avg)
        _, h1, h2 = hamiltonians(guiding, None, theta_avg, theta2_avg)
    else:
        potential = None if problem.potential.name == "zero" else problem.potential
        hbar, h1, h2 = hamiltonians(guiding, potential, theta_avg, theta2_avg)
    norm = np.linalg.norm(states, axis=1)
    return pd.DataFrame({"t": trajectory.times, "Hbar": hbar, "H1": h1, "H2": h2, "norm": norm})


def run_energy_audit(cfg: ExperimentConfig, app_config: Optional[Config] = None,
                     executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    log = log or logger
    if cfg.system != SystemId.PARTICLE:
        raise ConfigurationError("能量审计只适用于带电粒子系统")
    dt = cfg.dt_list[0]
    epsilon = cfg.eps_list[0]
    schemes = [cfg.scheme, *cfg.compare]
    log.info(f"能量审计开始: {cfg.id}, 格式={[s.value for s in schemes]}, Δt={dt}, T={cfg.T}")

    def audit(scheme: SchemeId) -> pd.DataFrame:
        problem = build_problem(cfg, epsilon)
        if scheme in LINEAR_SCHEMES:
            problem.nonlinear = None
            problem.potential = PotentialField.zero()
        frame = energy_series(problem, integrate(problem, scheme, dt, cfg.T))
        frame.insert(0, "scheme", scheme.value)
        return frame

    frames = _map_ordered(audit, schemes, executor)
    metrics = {}
    for scheme, frame in zip(schemes, frames):
        for column, name in (("Hbar", "hbar_drift"), ("H1", "h1_drift"), ("H2", "h2_drift"),
                               ("norm", "norm_drift")):
            metrics[_metric(scheme, cfg.scheme, name)] = relative_drift(frame[column])
        log.info(f"格式 {scheme.value}: H̄ 相对漂移={metrics[_metric(scheme, cfg.scheme, 'hbar_drift')]:.2e}")
    return ExperimentOutcome(tables={"energy": pd.concat(frames, ignore_index=True)}, metrics=metrics)


# ---------------------------------------------------------------------------
# 频谱
# ---------------------------------------------------------------------------

def dft_spectrum(series: Sequence[float], dt: float, window: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """去均值后的单边 DFT 幅值，横轴为角频率"""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    if window:
        x = x * np.hanning(len(x))
    magnitude = np.abs(scipy.fft.rfft(x))
    omega = 2.0 * math.pi * scipy.fft.rfftfreq(len(x), d=dt)
    return omega, magnitude


def find_peaks(omega: np.ndarray, magnitude: np.ndarray, threshold: float = 10.0) -> List[Tuple[float, float]]:
    """高于中位数 threshold 倍的局部极大值，按幅值降序"""
    if len(magnitude) < 3:
        return []
    level = threshold * float(np.median(magnitude))
    mid = magnitude[1:-1]
    is_peak = (mid >= magnitude[:-2]) & (mid > magnitude[2:]) & (mid > level)
    index = np.nonzero(is_peak)[0] + 1
    order = index[np.argsort(-magnitude[index], kind="stable")]
    return [(float(omega[i]), float(magnitude[i])) for i in order]


def match_peaks(peaks: Sequence[Tuple[float, float]], expected: Sequence[float]) -> List[Tuple[float, float, float]]:
    """对每个期望频率找最近的峰：(期望, 峰频率, 偏差)"""
    matches = []
    for target in expected:
        if not peaks:
            matches.append((target, math.nan, math.inf))
            continue
        omega, _ = min(peaks, key=lambda p: abs(p[0] - target))
        matches.append((target, omega, abs(omega - target)))
    return matches


def run_spectrum(cfg: ExperimentConfig, app_config: Optional[Config] = None,
                 executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    """
    振荡轨迹 (x₁)_n 与平均轨迹 (x̄₁)_n 的 DFT 峰
    与 ⟨A⟩ 特征值虚部比较；门限只使用平均轨迹
    """
    log = log or logger
    dt = cfg.dt_list[0]
    epsilon = cfg.eps_list[0]
    averaged_scheme = cfg.compare[0] if cfg.compare else SchemeId.AVERAGED_MIDPOINT
    bin_width = 2.0 * math.pi / cfg.T
    log.info(f"频谱分析开始: {cfg.id}, 格式={cfg.scheme.value}, ε={epsilon:g}, Δt={dt}, T={cfg.T}")

    def analyse(B_amp: float):
        problem = build_problem(cfg, epsilon, B_amp)
        expected = averaged_frequencies(problem.system)
        spectrum_rows, peak_rows = [], []
        offsets = []
        for label, scheme in (("oscillatory", cfg.scheme), ("averaged", averaged_scheme)):
            trajectory = integrate(problem, scheme, dt, cfg.T)
            omega, magnitude = dft_spectrum(trajectory.states[:, 0], dt, cfg.window)
            keep = omega <= max(10.0, 4.0 * max(expected))
            spectrum_rows.append(pd.DataFrame({"trajectory": label, "B": B_amp,
                                               "omega": omega[keep], "magnitude": magnitude[keep]}))
            peaks = find_peaks(omega, magnitude)
            by_omega = dict(peaks)
            for target, found, offset in match_peaks(peaks, expected):
                peak_rows.append({"trajectory": label, "B": B_amp, "omega": found,
                                  "magnitude": by_omega.get(found, math.nan), "expected": target,
                                  "offset": offset})
                if label == "averaged":
                    offsets.append(offset)
        log.debug(f"B={B_amp}: 期望频率={['%.4f' % w for w in expected]}")
        return pd.concat(spectrum_rows, ignore_index=True), peak_rows, max(offsets)

    results = _map_ordered(analyse, cfg.B_values(), executor)
    spectrum = pd.concat([r[0] for r in results], ignore_index=True)
    peaks = pd.DataFrame([row for r in results for row in r[1]])
    worst = max(r[2] for r in results)
    log.info(f"平均轨迹峰值最大偏差={worst:.4f}（频率分辨率 {bin_width:.4f}）")
    return ExperimentOutcome(tables={"spectrum": spectrum, "peaks": peaks},
                             metrics={"peak_offset": worst, "peak_offset_bins": worst / bin_width})


# ---------------------------------------------------------------------------
# 约束性
# ---------------------------------------------------------------------------

def run_confinement(cfg: ExperimentConfig, app_config: Optional[Config] = None,
                    executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    """各 (B, ε) 下 SAV-UA 轨迹与平均轨迹的相迹及最大位移"""
    log = log or logger
    dt = cfg.dt_list[0]
    averaged_scheme = cfg.compare[0] if cfg.compare else SchemeId.SAV_AVERAGED_TAYLOR
    log.info(f"约束性研究开始: {cfg.id}, B={cfg.B_list}, ε={cfg.eps_list}, Δt={dt}, T={cfg.T}")
    grid = [(B_amp, epsilon) for B_amp in cfg.B_list for epsilon in cfg.eps_list]

    def trace(point):
        B_amp, epsilon = point
        problem = build_problem(cfg, epsilon, B_amp)
        oscillatory = integrate(problem, cfg.scheme, dt, cfg.T)
        averaged = integrate(problem, averaged_scheme, dt, cfg.T)
        frame = pd.DataFrame({
            "B": B_amp, "eps": epsilon, "t": oscillatory.times,
            "x1": oscillatory.states[:, 0], "x2": oscillatory.states[:, 1],
            "xbar1": averaged.states[:, 0], "xbar2": averaged.states[:, 1],
        })
        extent = {
            "B": B_amp, "eps": epsilon,
            "max_extent": float(np.max(np.linalg.norm(oscillatory.states[:, :2], axis=1))),
            "max_extent_bar": float(np.max(np.linalg.norm(averaged.states[:, :2], axis=1))),
        }
        log.debug(f"B={B_amp}, ε={epsilon:g}: 最大位移={extent['max_extent']:.4f}")
        return frame, extent

    results = _map_ordered(trace, grid, executor)
    traces = pd.concat([r[0] for r in results], ignore_index=True)
    extents = pd.DataFrame([r[1] for r in results])

    metrics = {}
    monotone = []
    for epsilon in cfg.eps_list:
        part = extents[extents["eps"] == epsilon].sort_values("B")
        ok = bool(np.all(np.diff(part["max_extent"].values) < 0))
        metrics[f"monotone_eps_{epsilon:g}"] = float(ok)
        monotone.append(ok)
    metrics["monotone_in_B"] = float(all(monotone))
    small, large = min(cfg.eps_list), max(cfg.eps_list)
    ordering = []
    for B_amp in cfg.B_list:
        part = extents[extents["B"] == B_amp].set_index("eps")["max_extent"]
        ordering.append(part[small] <= part[large])
    metrics["eps_ordering"] = float(all(ordering))
    log.info(f"约束性: B 单调={metrics['monotone_in_B']:.0f}, ε 有序={metrics['eps_ordering']:.0f}")
    return ExperimentOutcome(tables={"traces": traces, "extents": extents}, metrics=metrics)


# ---------------------------------------------------------------------------
# 朗道阻尼
# ---------------------------------------------------------------------------

def fit_decay_rate(times: Sequence[float], values: Sequence[float], window: Tuple[float, float] = (5.0, 30.0),
                   factor: float = 0.5) -> DecayFit:
    """
    窗口 (t₀, t₁) 内非严格局部极大值的对数对 t 作最小二乘
    能量以 2γ 衰减，factor=½ 时返回 γ
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise ValueError("时间与数值序列形状不一致")
    if np.any(v[np.isfinite(v)] <= 0):
        raise ValueError("能量序列必须为正")
    lo, hi = window
    interior = np.arange(1, len(v) - 1)
    is_peak = (v[interior] >= v[interior - 1]) & (v[interior] >= v[interior + 1])
    inside = (t[interior] > lo) & (t[interior] < hi)
    index = interior[is_peak & inside]
    if len(index) < 4:
        raise TooFewPeaksError(f"窗口 {window} 内只有 {len(index)} 个峰值（至少需要 4 个）")
    peak_t, peak_v = t[index], v[index]
    coeffs = np.polyfit(peak_t, np.log(peak_v), 1)
    residual = float(np.sqrt(np.mean((np.polyval(coeffs, peak_t) - np.log(peak_v)) ** 2)))
    return DecayFit(rate=float(coeffs[0]) * factor, residual=residual, peak_times=peak_t, peak_values=peak_v)


def _dominant_wavenumber(pic) -> Optional[float]:
    candidates = [k for k, xi in ((pic.k1, pic.xi1), (pic.k2, pic.xi2)) if xi != 0.0]
    return min(candidates) if candidates else None


def momentum_drift(momenta: np.ndarray) -> float:
    """相邻两步总动量之差的最大分量"""
    if len(momenta) < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(momenta, axis=0))))


def classify_decay(rate: float, reference_rate: float) -> str:
    """γ_B ≤ ½γ₀ 判为阻尼，否则判为阻尼瓦解"""
    return "damping" if rate <= LANDAU_CLASS_FACTOR * reference_rate else "disintegrated"


def run_landau(cfg: ExperimentConfig, app_config: Optional[Config] = None,
               executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    log = log or logger
    app_config = app_config or get_config()
    pic = cfg.pic
    k = _dominant_wavenumber(pic)
    oracle_rate = math.nan
    if k is not None and 0.2 <= k <= 0.6:
        oracle_rate = landau_dispersion_rate(k).imag
    else:
        log.warning(f"主导波数 {k} 不在色散预言机范围内，不给出理论衰减率")
    expected = pic.expected_rate if pic.expected_rate is not None else oracle_rate
    log.info(f"朗道阻尼开始: {cfg.id}, k={k}, B={cfg.B_values()}, 理论衰减率={expected:.4f}")

    energy_frames, fits = [], {}
    for B_amp in cfg.B_values():
        settings = PicSettings(
            ic=InitCondition(pic.xi1, pic.xi2, pic.k1, pic.k2),
            n1=pic.n1, n2=pic.n2, particles_per_cell=pic.particles_per_cell,
            spline_order=pic.spline_order, dt=pic.dt, t_final=pic.t_final,
            B_amp=B_amp, epsilon=cfg.eps_list[0], profile=PROFILES[cfg.profile](),
            pusher=PusherMode(pic.pusher), seed=pic.seed, chunk_size=app_config.pic.chunk_size,
            snapshot_every=pic.snapshot_every,
        )
        result = PicSimulation(settings, executor=executor, run_logger=log).run()
        energy_frames.append(pd.DataFrame({"B": B_amp, "t": result.times, "energy": result.energies,
                                           "momentum1": result.momenta[:, 0], "momentum2": result.momenta[:, 1]}))
        fits[B_amp] = (fit_decay_rate(result.times, result.energies, pic.fit_window), result.snapshots,
                       momentum_drift(result.momenta))

    base = fits[0.0][0].rate if 0.0 in fits else expected
    rows, snapshot_rows, metrics, residuals = [], [], {}, {}
    for B_amp, (fit, snapshots, drift) in fits.items():
        gap = abs(fit.rate - expected) / abs(expected) if math.isfinite(expected) and expected else math.nan
        label = classify_decay(fit.rate, base)
        rows.append({"B": B_amp, "k": k, "fitted_rate": fit.rate, "residual": fit.residual, "peaks": fit.peaks,
                     "oracle_rate": oracle_rate, "gap": gap, "classification": label, "momentum_drift": drift})
        suffix = f"B{B_amp:g}"
        metrics[f"rate_{suffix}"] = fit.rate
        residuals[f"rate_{suffix}"] = fit.residual
        metrics[f"gap_{suffix}"] = gap
        metrics[f"damping_{suffix}"] = 1.0 if label == "damping" else 0.0
        metrics[f"momentum_drift_{suffix}"] = drift
        for t, state in snapshots:
            snapshot_rows.append(pd.DataFrame({"B": B_amp, "t": t, "x1": state[:, 0], "x2": state[:, 1],
                                               "q1": state[:, 2], "q2": state[:, 3]}))
        log.info(f"B={B_amp}: 拟合衰减率={fit.rate:.4f} (残差 {fit.residual:.2e}, 峰数 {fit.peaks}), 判定={label}")
    first = cfg.B_values()[0]
    metrics["rate"] = metrics[f"rate_B{first:g}"]
    metrics["rate_gap"] = metrics[f"gap_B{first:g}"]
    metrics["momentum_drift"] = metrics[f"momentum_drift_B{first:g}"]
    residuals["rate"] = residuals[f"rate_B{first:g}"]
    tables = {"landau_energy": pd.concat(energy_frames, ignore_index=True), "landau_rates": pd.DataFrame(rows)}
    if snapshot_rows:
        tables["snapshots"] = pd.concat(snapshot_rows, ignore_index=True)
    return ExperimentOutcome(tables=tables, metrics=metrics, residuals=residuals)


# ---------------------------------------------------------------------------
# 预言机自检
# ---------------------------------------------------------------------------

def _oracle_sequences(profile: PeriodicProfile, epsilon: float) -> List[List[OscPoly]]:
    theta = profile_as_oscpoly(profile, 1, epsilon)
    theta2 = profile_as_oscpoly(profile, 2, epsilon)
    ramp = OscPoly.from_terms(epsilon, [(1.0, 1, 0)], profile.period)
    return [[theta], [theta, theta2], [theta, ramp, theta2]]


def run_oracle(cfg: ExperimentConfig, app_config: Optional[Config] = None,
               executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    """
    色散关系表、闭式嵌套积分与自适应数值积分的比对、平均值展开残差
    数值积分比对只在 ε ≥ 1e-2 上进行；相对误差以 max(|积分|, Δt^深度) 归一
    """
    log = log or logger
    profile = PROFILES[cfg.profile]()
    t_n = 0.3
    log.info(f"预言机自检开始: {cfg.id}, θ={profile.name}")

    dispersion = []
    for k in cfg.k_list:
        root = landau_dispersion_rate(k)
        dispersion.append({"k": k, "omega_r": root.real, "gamma": root.imag,
                           "residual": abs(dispersion_function(root, k))})

    def compare(point):
        epsilon, dt = point
        rows = []
        for seq in _oracle_sequences(profile, epsilon):
            closed = nested_integral(seq, t_n, dt).real
            integrands = [lambda s, p=p: float(np.real(p(s))) for p in seq]
            reference = quadrature_oracle(integrands, t_n, t_n + dt)
            scale = max(abs(reference), dt ** len(seq))
            rows.append({"depth": len(seq), "eps": epsilon, "dt": dt, "t_n": t_n, "closed_form": closed,
                         "quadrature": reference, "rel_err": abs(closed - reference) / scale})
        return rows

    grid = [(eps, dt) for eps in cfg.eps_list if eps >= 1e-2 for dt in cfg.dt_list]
    quadrature = pd.DataFrame([row for rows in _map_ordered(compare, grid, executor) for row in rows],
                              columns=["depth", "eps", "dt", "t_n", "closed_form", "quadrature", "rel_err"])

    dt = cfg.dt_list[0]
    lemma_rows = []
    for epsilon in cfg.eps_list:
        bounds = lemma_bounds(profile, epsilon, dt)
        envelope = {name: 0.0 for name in bounds}
        for j in range(LEMMA_PHASES):
            phase = t_n + j * epsilon * profile.period / LEMMA_PHASES
            for name, value in lemma_residuals(profile, epsilon, phase, dt).items():
                envelope[name] = max(envelope[name], value)
        for name, value in envelope.items():
            lemma_rows.append({"identity": name, "eps": epsilon, "residual": value, "bound": bounds[name]})
    lemma = pd.DataFrame(lemma_rows)
    lemma_fits = []
    for name, part in lemma.groupby("identity", sort=True):
        fit = fit_loglog(part["eps"], part["residual"], cfg.fit_floor)
        lemma_fits.append({"identity": name, "slope": fit.slope, "residual": fit.residual})

    ratio = lemma["residual"] / lemma["bound"].where(lemma["bound"] > 0)
    metrics = {
        "quadrature_max_rel_err": float(quadrature["rel_err"].max()) if len(quadrature) else math.nan,
        "lemma_bound_ratio": float(ratio.max()),
        "dispersion_max_residual": float(max(row["residual"] for row in dispersion)) if dispersion else math.nan,
    }
    for row in dispersion:
        metrics[f"gamma_k{row['k']:g}"] = row["gamma"]
    log.info(f"预言机自检: 数值积分最大相对误差={metrics['quadrature_max_rel_err']:.2e}, "
             f"展开残差/上界最大值={metrics['lemma_bound_ratio']:.3f}")
    return ExperimentOutcome(tables={"dispersion": pd.DataFrame(dispersion), "quadrature": quadrature,
                                     "lemma": lemma, "lemma_fits": pd.DataFrame(lemma_fits)},
                             metrics=metrics)


# ---------------------------------------------------------------------------
# 分派
# ---------------------------------------------------------------------------

RUNNERS = {
    ExperimentKind.CONVERGE: run_convergence,
    ExperimentKind.DEGENERACY: run_degeneracy,
    ExperimentKind.ENERGY: run_energy_audit,
    ExperimentKind.SPECTRUM: run_spectrum,
    ExperimentKind.CONFINE: run_confinement,
    ExperimentKind.LANDAU: run_landau,
    ExperimentKind.ORACLE: run_oracle,
}


def run_experiment(cfg: ExperimentConfig, app_config: Optional[Config] = None,
                   executor: Optional[Executor] = None, log=None) -> ExperimentOutcome:
    """运行一次实验并判定门限"""
    log = log or logger
    try:
        outcome = RUNNERS[cfg.experiment](cfg, app_config=app_config, executor=executor, log=log)
    except UapicError as e:
        log.error(f"实验 {cfg.id} 失败: {e}")
        raise
    outcome.gates = evaluate_gates(cfg.gates, outcome.metrics, outcome.residuals)
    for gate in outcome.gates:
        verdict = "通过" if gate.passed else "未通过"
        log.info(f"门限 {gate.name}: 值={gate.value:.6g}, 范围=[{gate.lower}, {gate.upper}] → {verdict}")
    return outcome
