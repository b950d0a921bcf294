"""
参考解与暴力数值预言机
所有误差表和示例数值都以此为基准；与被测格式不共享代码路径
"""
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.optimize
import scipy.special
from loguru import logger

from services.errors import (
    ConfigurationError,
    DispersionConvergenceError,
    QuadratureToleranceError,
    ReferenceBudgetError,
    ReferenceGateError,
)
from services.linear_ua import LinearOscSystem

_CHUNK = 65536

# 非线性参考解路线：auto 在直接 RK4 超出预算时改用频闪平均
NONLINEAR_ROUTES = ("auto", "rk4", "stroboscopic")


@dataclass
class ReferenceConfig:
    """
    参考解参数：Δt_ref ≤ min(εP, 1)/substeps_per_fast_period
    strobe_tolerance 为频闪路线上 DOP853 的相对与绝对容差
    """
    substeps_per_fast_period: int = 200
    self_convergence_tol: float = 1e-10
    max_refinements: int = 4
    max_steps: int = 4_000_000
    method: str = "rk4"
    nonlinear_route: str = "auto"
    strobe_tolerance: float = 1e-13

    def __post_init__(self):
        if self.nonlinear_route not in NONLINEAR_ROUTES:
            raise ConfigurationError(f"未知参考解路线: {self.nonlinear_route}（可选 {NONLINEAR_ROUTES}）")


@dataclass
class ReferenceSolution:
    """参考轨迹"""
    times: np.ndarray
    states: np.ndarray
    substeps: int
    dt_ref: float
    self_convergence: float
    method: str

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


# ---------------------------------------------------------------------------
# 经典四级 Runge-Kutta
# ---------------------------------------------------------------------------

def rk4_integrate(rhs: Callable[[float, np.ndarray], np.ndarray], U0: np.ndarray,
                  times: Sequence[float], max_step: float, t0: float = 0.0) -> np.ndarray:
    """逐段积分到各采样时刻，每段步长不超过 max_step"""
    U = np.array(U0, dtype=float)
    out = []
    t = t0
    for target in times:
        span = target - t
        n = max(1, int(math.ceil(span / max_step - 1e-12))) if span > 0 else 0
        h = span / n if n else 0.0
        for i in range(n):
            ti = t + i * h
            k1 = rhs(ti, U)
            k2 = rhs(ti + 0.5 * h, U + 0.5 * h * k1)
            k3 = rhs(ti + 0.5 * h, U + 0.5 * h * k2)
            k4 = rhs(ti + h, U + h * k3)
            U = U + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = target
        out.append(U.copy())
    return np.array(out)


def _theta_powers(system: LinearOscSystem, times: np.ndarray) -> np.ndarray:
    """各时刻的 A(t/ε)，形状 (n, d, d)"""
    theta = system.profile.evaluate(times / system.epsilon)
    total = np.zeros((times.size, system.dim, system.dim))
    for m, mat in system.components.items():
        total += np.multiply.outer(theta ** m, mat)
    return total


def _stage_matrices(system: LinearOscSystem, t0: float, h: float, start: int, stop: int):
    idx = np.arange(start, stop)
    base = t0 + idx * h
    return (_theta_powers(system, base), _theta_powers(system, base + 0.5 * h),
            _theta_powers(system, base + h))


def _linear_increment(system: LinearOscSystem, t0: float, t1: float, n: int) -> np.ndarray:
    """E = Φ(t₁, t₀) − I，对增量积分以保留小量精度"""
    d = system.dim
    eye = np.eye(d)
    E = np.zeros((d, d))
    if t1 <= t0:
        return E
    h = (t1 - t0) / n
    for start in range(0, n, _CHUNK):
        stop = min(n, start + _CHUNK)
        a0, am, a1 = _stage_matrices(system, t0, h, start, stop)
        for i in range(stop - start):
            Y = eye + E
            k1 = a0[i] @ Y
            k2 = am[i] @ (Y + 0.5 * h * k1)
            k3 = am[i] @ (Y + 0.5 * h * k2)
            k4 = a1[i] @ (Y + h * k3)
            E = E + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return E


def _nonlinear_rk4(system: LinearOscSystem, nonlinear, U0: np.ndarray, t0: float, t1: float, n: int) -> np.ndarray:
    U = np.array(U0, dtype=float)
    if t1 <= t0:
        return U
    h = (t1 - t0) / n
    for start in range(0, n, _CHUNK):
        stop = min(n, start + _CHUNK)
        a0, am, a1 = _stage_matrices(system, t0, h, start, stop)
        for i in range(stop - start):
            k1 = a0[i] @ U + nonlinear(U)
            Y = U + 0.5 * h * k1
            k2 = am[i] @ Y + nonlinear(Y)
            Y = U + 0.5 * h * k2
            k3 = am[i] @ Y + nonlinear(Y)
            Y = U + h * k3
            k4 = a1[i] @ Y + nonlinear(Y)
            U = U + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return U


def _matrix_log_series(E: np.ndarray) -> np.ndarray:
    """log(I + E) = Σ (−1)^{j+1}E^j/j，要求 ‖E‖ < 1/2"""
    total = np.zeros_like(E)
    term = np.eye(E.shape[0])
    for j in range(1, 200):
        term = term @ E
        piece = ((-1.0) ** (j + 1) / j) * term
        total = total + piece
        if np.max(np.abs(piece)) < 1e-18:
            break
    return total


def _period_power(E_period: np.ndarray, periods: int) -> np.ndarray:
    d = E_period.shape[0]
    if periods == 0:
        return np.eye(d)
    if periods <= 64:
        return np.linalg.matrix_power(np.eye(d) + E_period, periods)
    if np.linalg.norm(E_period, 2) < 0.5:
        log_map = _matrix_log_series(E_period)
    else:
        log_map = scipy.linalg.logm(np.eye(d) + E_period)
    return scipy.linalg.expm(periods * log_map).real


def _scalar_exponent(system: LinearOscSystem, t: float) -> float:
    """∫_0^t a(s/ε)ds 的闭式（傅里叶逐项积分）"""
    profile = system.profile
    total = 0.0
    for m, mat in system.components.items():
        coeff = float(mat[0, 0])
        if m == 0:
            total += coeff * t
            continue
        integral = 0.0 + 0.0j
        cycles = t / (profile.period * system.epsilon)
        for k, c in profile.power_coeffs(m).items():
            if k == 0:
                integral += c * t
            else:
                lam = 2.0 * math.pi * k / (profile.period * system.epsilon)
                phase = np.exp(2j * math.pi * math.fmod(k * cycles, 1.0))
                integral += c * (phase - 1.0) / (1j * lam)
        total += coeff * integral.real
    return total


def _fast_period(system: LinearOscSystem) -> float:
    """A(t/ε) 的周期 εP；自治系统没有快周期"""
    return math.inf if system.is_autonomous else system.epsilon * system.profile.period


def _vector_field(matrix: np.ndarray, nonlinear, U: np.ndarray) -> np.ndarray:
    return matrix @ U + nonlinear(U)


class _Resolution:
    """一次给定细分下的参考计算"""

    def __init__(self, system: LinearOscSystem, substeps: int, max_steps: int):
        self.system = system
        self.substeps = substeps
        self.period = _fast_period(system)
        self.dt_ref = min(self.period, 1.0) / substeps
        self.max_steps = max_steps
        self._stages = None

    def steps_for(self, span: float) -> int:
        n = max(1, int(math.ceil(span / self.dt_ref - 1e-9)))
        if n > self.max_steps:
            raise ReferenceBudgetError(
                f"参考解步数 {n} 超出预算 {self.max_steps} (ε={self.system.epsilon:g}, 区间={span:g})")
        return n

    def linear(self, U0: np.ndarray, times: Sequence[float]) -> np.ndarray:
        E_period = _linear_increment(self.system, 0.0, self.period, self.steps_for(self.period))
        states = []
        for t in times:
            periods = int(math.floor(t / self.period))
            remainder = t - periods * self.period
            E_rem = _linear_increment(self.system, 0.0, remainder, self.steps_for(remainder)) \
                if remainder > 0 else np.zeros_like(E_period)
            flow = (np.eye(self.system.dim) + E_rem) @ _period_power(E_period, periods)
            states.append(flow @ U0)
        return np.array(states)

    def nonlinear(self, nonlinear, U0: np.ndarray, times: Sequence[float]) -> np.ndarray:
        total = self.steps_for(max(times))
        logger.debug(f"非线性参考解: 步数≈{total}, Δt_ref={self.dt_ref:.3e}")
        U = np.array(U0, dtype=float)
        t = 0.0
        states = []
        for target in times:
            if target > t:
                U = _nonlinear_rk4(self.system, nonlinear, U, t, target, self.steps_for(target - t))
            t = target
            states.append(U.copy())
        return np.array(states)

    # ========== 频闪平均路线 ==========

    def _period_stages(self):
        """一个快周期内各 RK4 级的 A 值；A 以 εP 为周期，所有周期共用"""
        if self._stages is None:
            self._stages = _stage_matrices(self.system, 0.0, self.dt_ref, 0, self.substeps)
        return self._stages

    def _strobe_increments(self, nonlinear, V: np.ndarray, backward: bool) -> List[np.ndarray]:
        """
        从周期起点的 V 出发向前（或向后）积分两个快周期，返回一、二周期后的增量
        积分增量 D = U − V，舍入误差相对于 O(εP) 的增量而非 O(1) 的状态
        """
        a0, am, a1 = self._period_stages()
        h = -self.dt_ref if backward else self.dt_ref
        order = range(self.substeps - 1, -1, -1) if backward else range(self.substeps)
        D = np.zeros_like(V)
        increments = []
        for _ in range(2):
            for i in order:
                first, last = (a1[i], a0[i]) if backward else (a0[i], a1[i])
                k1 = _vector_field(first, nonlinear, V + D)
                k2 = _vector_field(am[i], nonlinear, V + (D + 0.5 * h * k1))
                k3 = _vector_field(am[i], nonlinear, V + (D + 0.5 * h * k2))
                k4 = _vector_field(last, nonlinear, V + (D + h * k3))
                D = D + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            increments.append(D.copy())
        return increments

    def _strobe_field(self, nonlinear, V: np.ndarray) -> np.ndarray:
        """
        周期映射 Ψ = exp(εP·F) 的生成向量场 F
        对 s ↦ Ψ^s(V) 在 s = ±1, ±2 用四阶中心差分，误差 O((εP)⁴)
        """
        f1, f2 = self._strobe_increments(nonlinear, V, backward=False)
        b1, b2 = self._strobe_increments(nonlinear, V, backward=True)
        return (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * self.period)

    def stroboscopic(self, nonlinear, U0: np.ndarray, times: Sequence[float], tolerance: float) -> np.ndarray:
        """
        频闪时刻 nεP 上的精确解满足自治方程 V̇ = F(V)；对 V 用 DOP853，
        最后不足一个周期的部分直接积分
        每次求 F 花费 4 个快周期的微观步，计入预算
        """
        if not self.period < 1.0:
            raise ConfigurationError(f"快周期 εP={self.period:g} 不小于 1，不能使用频闪路线")
        periods = [int(math.floor(t / self.period)) for t in times]
        budget = self.max_steps - self.substeps * len(times)
        evaluations = 0

        def generator(_, V):
            nonlocal evaluations
            evaluations += 1
            if 4 * self.substeps * evaluations > budget:
                raise ReferenceBudgetError(
                    f"频闪参考解步数超出预算 {self.max_steps} (ε={self.system.epsilon:g}, 已求值 {evaluations} 次)")
            return self._strobe_field(nonlinear, V)

        U0 = np.array(U0, dtype=float)
        strobe_times = np.unique([n * self.period for n in periods])
        if strobe_times[-1] > 0.0:
            solution = scipy.integrate.solve_ivp(generator, (0.0, strobe_times[-1]), U0, method="DOP853",
                                                 t_eval=strobe_times, rtol=tolerance, atol=tolerance)
            if not solution.success:
                raise ReferenceGateError(f"频闪参考解积分失败: {solution.message}")
            strobed = dict(zip(strobe_times, solution.y.T))
        else:
            strobed = {}
        logger.debug(f"频闪参考解: F 求值 {evaluations} 次, 周期细分={self.substeps}")

        states = []
        for target, n in zip(times, periods):
            V = strobed.get(n * self.period, U0)
            remainder = target - n * self.period
            U = _nonlinear_rk4(self.system, nonlinear, V, 0.0, remainder, self.steps_for(remainder)) \
                if remainder > 0 else np.array(V, dtype=float)
            states.append(U)
        return np.array(states)


def _nonlinear_route(system: LinearOscSystem, T: float, cfg: ReferenceConfig) -> str:
    if cfg.nonlinear_route != "auto":
        return cfg.nonlinear_route
    period = _fast_period(system)
    if not period < 1.0:
        return "rk4"
    # 留出一次细分加倍的余量
    fine_steps = math.ceil(T * 2 * cfg.substeps_per_fast_period / period)
    return "rk4" if 2 * fine_steps <= cfg.max_steps else "stroboscopic"


def reference_solve(system: LinearOscSystem, U0, T: float, cfg: Optional[ReferenceConfig] = None,
                    nonlinear=None, times: Optional[Sequence[float]] = None) -> ReferenceSolution:
    """
    高精度参考轨迹（自 t=0 起）
    标量线性与自治线性：闭式；线性：一个快周期上积分后取周期映射的幂；
    非线性：直接 RK4，步数超出预算时改用频闪平均（εP 很小时）
    输出前进行自收敛检验：细分加倍后终点相对变化 ≤ self_convergence_tol
    """
    cfg = cfg or ReferenceConfig()
    U0 = np.atleast_1d(np.asarray(U0, dtype=float))
    sample_times = np.array(sorted(times) if times is not None else [T], dtype=float)
    if sample_times[-1] > T + 1e-12 or sample_times[0] < 0:
        raise ValueError(f"采样时刻必须位于 [0, {T}]")

    if nonlinear is None and system.dim == 1:
        states = np.array([U0 * math.exp(_scalar_exponent(system, t)) for t in sample_times])
        return ReferenceSolution(sample_times, states, 0, 0.0, 0.0, "closed_form")
    if nonlinear is None and system.is_autonomous:
        generator = system.components[0]
        states = np.array([scipy.linalg.expm(t * generator) @ U0 for t in sample_times])
        return ReferenceSolution(sample_times, states, 0, 0.0, 0.0, "closed_form")

    route = "linear_period_map" if nonlinear is None else _nonlinear_route(system, T, cfg)
    if route != "rk4":
        logger.debug(f"参考解路线: {route} (ε={system.epsilon:g})")

    def compute(substeps: int) -> np.ndarray:
        resolution = _Resolution(system, substeps, cfg.max_steps)
        if route == "linear_period_map":
            return resolution.linear(U0, sample_times)
        if route == "stroboscopic":
            return resolution.stroboscopic(nonlinear, U0, sample_times, cfg.strobe_tolerance)
        return resolution.nonlinear(nonlinear, U0, sample_times)

    substeps = cfg.substeps_per_fast_period
    coarse = compute(substeps)
    for refinement in range(cfg.max_refinements + 1):
        fine = compute(2 * substeps)
        scale = max(float(np.linalg.norm(fine[-1])), 1e-300)
        change = float(np.linalg.norm(fine[-1] - coarse[-1])) / scale
        if change <= cfg.self_convergence_tol:
            dt_ref = min(_fast_period(system), 1.0) / (2 * substeps)
            logger.debug(f"参考解自收敛通过: ε={system.epsilon:g}, 细分={2 * substeps}, 相对变化={change:.2e}")
            return ReferenceSolution(sample_times, fine, 2 * substeps, dt_ref, change, route)
        if refinement < cfg.max_refinements:
            logger.warning(f"参考解自收敛未达标 (相对变化={change:.2e})，细分加倍后重试")
        substeps *= 2
        coarse = fine
    logger.error(f"参考解自收敛检验失败: ε={system.epsilon:g}, 相对变化={change:.2e}")
    raise ReferenceGateError(f"参考解自收敛检验失败 (ε={system.epsilon:g}, 相对变化={change:.2e})")


# ---------------------------------------------------------------------------
# 自适应数值积分预言机
# ---------------------------------------------------------------------------

def quadrature_oracle(integrands: Sequence[Callable[[float], float]], a: float, b: float,
                      tol: float = 1e-10, limit: int = 500) -> float:
    """
    ∫_a^b f₁(s₁) ∫_a^{s₁} f₂(s₂) … ds，嵌套层数 ≤ 3
    嵌套 scipy.integrate.quad；误差估计超过 tol 时抛出异常
    """
    if not 1 <= len(integrands) <= 3:
        raise ValueError(f"嵌套层数必须为 1..3: {len(integrands)}")
    inner_errors: List[float] = [0.0]

    def level(i: int, upper: float) -> float:
        f = integrands[i]
        if i == len(integrands) - 1:
            integrand = f
        else:
            def integrand(s, f=f):
                return f(s) * level(i + 1, s)
        value, err = scipy.integrate.quad(integrand, a, upper, epsabs=0.01 * tol, epsrel=1e-12, limit=limit)
        if i > 0:
            inner_errors[0] = max(inner_errors[0], err)
        else:
            inner_errors.append(err)
        return value

    value = level(0, b)
    estimate = inner_errors[-1] + (b - a) * inner_errors[0]
    if estimate > tol * max(1.0, abs(value)):
        raise QuadratureToleranceError(f"数值积分误差估计 {estimate:.2e} 超过容差 {tol:.0e}")
    return float(value)


# ---------------------------------------------------------------------------
# 朗道阻尼色散关系
# ---------------------------------------------------------------------------

def plasma_z(zeta):
    """Z(ζ) = i√π w(ζ)"""
    return 1j * math.sqrt(math.pi) * scipy.special.wofz(zeta)


def dispersion_function(omega: complex, k: float) -> complex:
    """D(ω, k) = 1 + (1 + ζZ(ζ))/k²，ζ = ω/(√2 k)"""
    zeta = omega / (math.sqrt(2.0) * k)
    return 1.0 + (1.0 + zeta * plasma_z(zeta)) / (k * k)


def dispersion_derivative(omega: complex, k: float) -> complex:
    """∂D/∂ω，利用 Z' = −2(1 + ζZ)"""
    zeta = omega / (math.sqrt(2.0) * k)
    z = plasma_z(zeta)
    z_prime = -2.0 * (1.0 + zeta * z)
    return (z + zeta * z_prime) / (k * k * math.sqrt(2.0) * k)


def landau_dispersion_rate(k: float, initial_guess: Optional[complex] = None, tol: float = 1e-10) -> complex:
    """
    单位 Maxwell 分布的一维静电色散关系最弱阻尼根 ω_r + iγ
    """
    if not 0.2 <= k <= 0.6:
        raise ConfigurationError(f"波数 k={k} 超出求根收敛域 [0.2, 0.6]")
    guess = initial_guess if initial_guess is not None else complex(math.sqrt(1.0 + 3.0 * k * k), -0.05)
    try:
        root = scipy.optimize.newton(dispersion_function, guess, fprime=dispersion_derivative,
                                     args=(k,), tol=1e-14, maxiter=200)
    except (RuntimeError, OverflowError) as e:
        logger.error(f"色散关系求根失败: k={k}, {e}")
        raise DispersionConvergenceError(f"色散关系求根不收敛 (k={k}): {e}")
    residual = abs(dispersion_function(root, k))
    if not np.isfinite(residual) or residual > tol:
        raise DispersionConvergenceError(f"色散关系残差过大 (k={k}): {residual:.2e}")
    logger.debug(f"色散关系根: k={k}, ω={root.real:.6f}, γ={root.imag:.6f}")
    return complex(root)
