"""
SAV 能量保持格式
辅助变量 r = exp(φ(x)) 使中点格式线性隐式并精确保持修正哈密顿量
"""
import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
from loguru import logger

from services.linear_ua import BlockReading, StepContext, particle_midpoint_matrix, solve_midpoint
from services.osc_quadrature import OscPoly, PeriodicProfile, nested_integral, profile_as_oscpoly
from services.particle_model import averaged_particle_matrix, field_scale, j_apply

ArrayMap = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class PotentialField:
    """势函数 φ 及其梯度与 Hessian（最后一维为空间分量）"""
    phi: ArrayMap
    grad: ArrayMap
    hess: ArrayMap
    name: str = "custom"

    # 常用势函数

    @classmethod
    def zero(cls) -> "PotentialField":
        return cls(
            phi=lambda x: np.zeros(np.shape(x)[:-1]),
            grad=lambda x: np.zeros_like(x, dtype=float),
            hess=lambda x: np.zeros(np.shape(x) + (2,)),
            name="zero",
        )

    @classmethod
    def quadratic(cls) -> "PotentialField":
        """φ = |x|²/2"""
        return cls(
            phi=lambda x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1),
            grad=lambda x: np.array(x, dtype=float),
            hess=lambda x: np.broadcast_to(np.eye(2), np.shape(x) + (2,)).copy(),
            name="quadratic",
        )

    @classmethod
    def linear(cls, c) -> "PotentialField":
        """φ = c·x"""
        c = np.asarray(c, dtype=float)
        return cls(
            phi=lambda x: np.asarray(x) @ c,
            grad=lambda x: np.broadcast_to(c, np.shape(x)).copy(),
            hess=lambda x: np.zeros(np.shape(x) + (2,)),
            name="linear",
        )

    @classmethod
    def oscillating(cls, sign: float = -1.0) -> "PotentialField":
        """
        φ = sign·(sin x₁ sin x₂ + |x|²/2 + (x₁⁴+x₂⁴)/4)
        sign = −1 时 g = (0, −∇φ) 即 (cos x₁ sin x₂ + x₁ + x₁³, sin x₁ cos x₂ + x₂ + x₂³)
        """
        def phi(x):
            x = np.asarray(x, dtype=float)
            x1, x2 = x[..., 0], x[..., 1]
            return sign * (np.sin(x1) * np.sin(x2) + 0.5 * (x1 ** 2 + x2 ** 2) + 0.25 * (x1 ** 4 + x2 ** 4))

        def grad(x):
            x = np.asarray(x, dtype=float)
            x1, x2 = x[..., 0], x[..., 1]
            return sign * np.stack([
                np.cos(x1) * np.sin(x2) + x1 + x1 ** 3,
                np.sin(x1) * np.cos(x2) + x2 + x2 ** 3,
            ], axis=-1)

        def hess(x):
            x = np.asarray(x, dtype=float)
            x1, x2 = x[..., 0], x[..., 1]
            out = np.zeros(x.shape + (2,))
            ss = np.sin(x1) * np.sin(x2)
            cc = np.cos(x1) * np.cos(x2)
            out[..., 0, 0] = -ss + 1.0 + 3.0 * x1 ** 2
            out[..., 0, 1] = cc
            out[..., 1, 0] = cc
            out[..., 1, 1] = -ss + 1.0 + 3.0 * x2 ** 2
            return sign * out

        return cls(phi=phi, grad=grad, hess=hess, name="oscillating" if sign < 0 else "confining_oscillating")

    @classmethod
    def confining_oscillating(cls) -> "PotentialField":
        """oscillating 的镜像，下有界（φ ≥ −1）"""
        return cls.oscillating(sign=1.0)


def check_derivatives(field: PotentialField, points: np.ndarray, h: float = 1e-6) -> Tuple[float, float]:
    """梯度与 Hessian 相对中心差分的最大相对误差"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grad_fd = np.zeros_like(points)
    hess_fd = np.zeros(points.shape + (2,))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        grad_fd[..., j] = (field.phi(points + e) - field.phi(points - e)) / (2 * h)
        hess_fd[..., :, j] = (field.grad(points + e) - field.grad(points - e)) / (2 * h)
    grad = field.grad(points)
    hess = field.hess(points)
    grad_err = np.max(np.abs(grad - grad_fd)) / max(1.0, float(np.max(np.abs(grad))))
    hess_err = np.max(np.abs(hess - hess_fd)) / max(1.0, float(np.max(np.abs(hess))))
    return float(grad_err), float(hess_err)


@dataclass
class SavState:
    """
    SAV 未知量 (x, q, log r)
    x_prev 为上一步位置（外推闭包使用），批量时首维为粒子
    """
    x: np.ndarray
    q: np.ndarray
    log_r: np.ndarray
    x_prev: Optional[np.ndarray] = None

    @property
    def r(self):
        return np.exp(self.log_r)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.q], axis=-1)


class BbarMode(str, Enum):
    """平均模型的 b̄ 闭包"""
    TAYLOR = "taylor"
    EXTRAPOLATION = "extrapolation"


class BMode(str, Enum):
    """振荡模型的 (1/Δt)∫b 闭包"""
    CHOICE1 = "choice1"  # 外推
    CHOICE2 = "choice2"  # 沿 h̃ 的泰勒展开


def init_sav(x0, q0, field: PotentialField) -> SavState:
    """r₀ = exp(φ(x₀))"""
    x0 = np.array(x0, dtype=float)
    q0 = np.array(q0, dtype=float)
    return SavState(x=x0, q=q0, log_r=np.asarray(field.phi(x0), dtype=float))


def hamiltonian_bar(s: SavState, theta_avg: float, theta2_avg: float):
    """H̄ = ½|q|² + ⟨θ⟩q·Jx + ½⟨θ²⟩|x|² + log r"""
    x, q = np.asarray(s.x, float), np.asarray(s.q, float)
    return (0.5 * np.sum(q * q, axis=-1) + theta_avg * np.sum(q * j_apply(x), axis=-1)
            + 0.5 * theta2_avg * np.sum(x * x, axis=-1) + s.log_r)


def _hess_apply(hess: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", hess, vec)


def bbar_taylor(s: SavState, field: PotentialField, theta_avg: float, dt: float) -> np.ndarray:
    """b̄ = ∇φ(x_n) + ∇²φ(x_n)·(Δt/2)(q_n + ⟨θ⟩Jx_n)"""
    drift = s.q + theta_avg * j_apply(s.x)
    return field.grad(s.x) + _hess_apply(field.hess(s.x), 0.5 * dt * drift)


def bbar_extrapolation(x_prev, x_curr, field: PotentialField) -> np.ndarray:
    """−½∇φ(x_{n−1}) + (3/2)∇φ(x_n)"""
    return -0.5 * field.grad(np.asarray(x_prev, float)) + 1.5 * field.grad(np.asarray(x_curr, float))


def _finish(s: SavState, U_next: np.ndarray, b_avg: np.ndarray) -> SavState:
    x_next, q_next = U_next[..., :2], U_next[..., 2:4]
    log_r = s.log_r + np.sum(b_avg * (x_next - s.x), axis=-1)
    return SavState(x=x_next.copy(), q=q_next.copy(), log_r=log_r, x_prev=np.array(s.x, copy=True))


def _velocity_forcing(vec: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros_like(vec), vec], axis=-1)


def step_sav_averaged(s: SavState, field: PotentialField, theta_avg: float, theta2_avg: float,
                      ctx: StepContext, bbar_mode: BbarMode = BbarMode.TAYLOR) -> SavState:
    """
    x̄_{n+1} − x̄_n = Δt q̄_{n+½} + Δt⟨θ⟩J x̄_{n+½}
    q̄_{n+1} − q̄_n = −Δt b̄ + Δt⟨θ⟩J q̄_{n+½} + Δt⟨θ²⟩J² x̄_{n+½}
    log r̄_{n+1} − log r̄_n = b̄·(x̄_{n+1} − x̄_n)
    """
    if bbar_mode == BbarMode.EXTRAPOLATION and s.x_prev is not None:
        b_avg = bbar_extrapolation(s.x_prev, s.x, field)
    else:
        b_avg = bbar_taylor(s, field, theta_avg, ctx.dt)
    G = ctx.dt * averaged_particle_matrix(theta_avg, theta2_avg)
    U_next = solve_midpoint(G, s.as_vector(), _velocity_forcing(-ctx.dt * b_avg))
    return _finish(s, U_next, b_avg)


@dataclass
class SavCoefficients:
    """振荡 SAV 格式每步所需的标量积分"""
    G: np.ndarray
    int_inner_theta: float    # ∫_{t_n}^{t_{n+1}}∫_{t_n}^s θ
    centered_moment: float    # ∫θ(t)(t − t_{n+½})dt


def sav_coefficients(profile: PeriodicProfile, B_amp: float, ctx: StepContext, epsilon: float,
                     reading: BlockReading = BlockReading.PROOF, normalized: bool = True) -> SavCoefficients:
    scale = field_scale(B_amp, normalized)
    G = particle_midpoint_matrix(profile, B_amp, ctx, epsilon, reading, normalized)
    if scale == 0.0 or not profile.coeffs:
        return SavCoefficients(G=G, int_inner_theta=0.0, centered_moment=0.0)
    theta = profile_as_oscpoly(profile.scaled(scale), 1, epsilon)
    one = OscPoly.constant(1.0, epsilon, profile.period)
    inner = nested_integral([one, theta], ctx.t_n, ctx.dt).real
    moment = (nested_integral([theta, one], ctx.t_n, ctx.dt)
              - 0.5 * ctx.dt * nested_integral([theta], ctx.t_n, ctx.dt)).real
    return SavCoefficients(G=G, int_inner_theta=inner, centered_moment=moment)


def b_choice2(s: SavState, field: PotentialField, ctx: StepContext, int_inner_theta: float) -> np.ndarray:
    """∇φ(x_n) + (Δt/2)∇²φ(x_n)q_n + (1/Δt)∇²φ(x_n)(∫∫θ)J x_n"""
    hess = field.hess(s.x)
    shift = 0.5 * ctx.dt * s.q + (int_inner_theta / ctx.dt) * j_apply(s.x)
    return field.grad(s.x) + _hess_apply(hess, shift)


def step_sav_ua(s: SavState, profile: PeriodicProfile, B_amp: float, field: PotentialField,
                ctx: StepContext, epsilon: float, b_mode: BMode = BMode.CHOICE2,
                reading: BlockReading = BlockReading.PROOF, normalized: bool = True,
                coefficients: Optional[SavCoefficients] = None) -> SavState:
    """
    x_{n+1} − x_n = (𝓑₁₁+½𝓐₁₁)x_{n+½} + (𝓑₁₂+½𝓐₁₂)q_{n+½}
    q_{n+1} − q_n = −Δt·β + (𝓑₂₁+½𝓐₂₁)x_{n+½} + (𝓑₂₂+½𝓐₂₂)q_{n+½} − (∫θ(t)(t−t_{n+½})dt)·J b_n
    log r_{n+1} − log r_n = β·(x_{n+1} − x_n)
    β 为 (1/Δt)∫b 的近似；choice1 首步以 choice2 启动
    """
    coeffs = coefficients or sav_coefficients(profile, B_amp, ctx, epsilon, reading, normalized)
    if b_mode == BMode.CHOICE1 and s.x_prev is not None:
        beta = bbar_extrapolation(s.x_prev, s.x, field)
    else:
        beta = b_choice2(s, field, ctx, coeffs.int_inner_theta)
    b_n = field.grad(s.x)
    kick = -ctx.dt * beta - coeffs.centered_moment * j_apply(b_n)
    U_next = solve_midpoint(coeffs.G, s.as_vector(), _velocity_forcing(kick))
    return _finish(s, U_next, beta)


def advance(s: SavState, stepper, ctx: StepContext, n_steps: int, **kwargs):
    """连续推进 n_steps 步，返回各步状态列表（含初值）"""
    states = [s]
    for _ in range(n_steps):
        s = stepper(s, ctx=ctx, **kwargs)
        ctx = ctx.advanced()
        states.append(s)
    logger.debug(f"SAV 推进完成: 步数={n_steps}, 终止时刻={ctx.t_n:g}")
    return states
