"""
线性一致精确格式
U̇ = A(t/ε)U 的显式 p 阶格式、朴素中点、UA 中点、两种平均模型极限格式，
以及带电粒子模型的分块中点格式
"""
import dataclasses
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import scipy.linalg
from loguru import logger

from services.errors import ProfileError, SingularStepError
from services.osc_quadrature import (
    TWO_PI,
    PeriodicProfile,
    exponential_kernels,
    nested_integral,
    power_average,
    profile_as_oscpoly,
    OscPoly,
)

ROTATION_J = np.array([[0.0, 1.0], [-1.0, 0.0]])
MAX_ORDER = 4
CONDITION_LIMIT = 1e12
_EINSUM_LETTERS = "abcdefgh"


@dataclass(frozen=True)
class StepContext:
    """单步上下文"""
    t_n: float
    dt: float
    order: int = 2

    def __post_init__(self):
        if self.dt <= 0:
            raise ProfileError(f"时间步长必须为正: {self.dt}")
        if self.order < 1:
            raise ProfileError(f"格式阶数必须 ≥ 1: {self.order}")

    @property
    def t_next(self) -> float:
        return self.t_n + self.dt

    def advanced(self) -> "StepContext":
        return dataclasses.replace(self, t_n=self.t_n + self.dt)


class BlockReading(str, Enum):
    """𝓐₁₂、𝓐₂₂ 中矩项的读法"""
    PROOF = "proof"      # (s−t_n)−(t_{n+1}−s)
    LITERAL = "literal"  # (s−t_n)−Δt


@dataclass(eq=False)
class LinearOscSystem:
    """
    A(t/ε) = Σ_m θ(t/ε)^m · A_m
    components 的键为 θ 的幂次，0 表示常数部分
    """
    components: Mapping[int, np.ndarray]
    profile: PeriodicProfile
    epsilon: float
    _cache: Dict[tuple, object] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ProfileError(f"ε 必须为正: {self.epsilon}")
        cleaned = {}
        for m, mat in self.components.items():
            if m < 0:
                raise ProfileError(f"θ 的幂次必须非负: {m}")
            mat = np.atleast_2d(np.asarray(mat, dtype=float))
            if mat.shape[0] != mat.shape[1]:
                raise ProfileError(f"系数矩阵必须为方阵: {mat.shape}")
            cleaned[int(m)] = mat
        if not cleaned:
            raise ProfileError("系统至少需要一个系数矩阵")
        shapes = {mat.shape for mat in cleaned.values()}
        if len(shapes) != 1:
            raise ProfileError(f"系数矩阵维数不一致: {shapes}")
        self.components = cleaned

    @property
    def dim(self) -> int:
        return next(iter(self.components.values())).shape[0]

    @property
    def is_autonomous(self) -> bool:
        """只有常数部分（例如平均系统），没有快时间尺度"""
        return set(self.components) == {0}

    def with_epsilon(self, epsilon: float) -> "LinearOscSystem":
        return LinearOscSystem(dict(self.components), self.profile, epsilon)

    def averaged(self) -> np.ndarray:
        """⟨A⟩：θ^m 替换为 ⟨θ^m⟩"""
        total = np.zeros((self.dim, self.dim))
        for m, mat in sorted(self.components.items()):
            total = total + (mat if m == 0 else power_average(self.profile, m) * mat)
        return total

    def evaluate(self, t: float) -> np.ndarray:
        theta = float(self.profile.evaluate(t / self.epsilon))
        total = np.zeros((self.dim, self.dim))
        for m, mat in sorted(self.components.items()):
            total = total + theta ** m * mat
        return total

    @property
    def modes(self) -> Tuple[int, ...]:
        keys = {0}
        for m in self.components:
            if m > 0:
                keys.update(self.profile.power_coeffs(m))
        return tuple(sorted(keys))

    def fourier_matrices(self, origin: float = 0.0) -> np.ndarray:
        """
        A(origin+τ) = Σ_k M_k e^{i2πkτ/(Pε)}，返回形状 (模态数, d, d) 的 M_k
        相位 e^{iλ_k·origin} 在 [0, εP) 内约化后计算
        """
        modes = self.modes
        cycles = origin / (self.profile.period * self.epsilon)
        out = np.zeros((len(modes), self.dim, self.dim), dtype=complex)
        for i, k in enumerate(modes):
            phase = np.exp(1j * TWO_PI * math.fmod(k * cycles, 1.0)) if k else 1.0
            for m, mat in self.components.items():
                if m == 0:
                    c = 1.0 if k == 0 else 0.0
                else:
                    c = self.profile.power_coeffs(m).get(k, 0.0)
                if c != 0:
                    out[i] += c * phase * mat
        return out

    def kernels(self, dt: float, depth: int) -> Dict[int, np.ndarray]:
        return exponential_kernels(self.modes, depth, self.epsilon, self.profile.period, dt)

    def integral(self, a: float, b: float) -> np.ndarray:
        """∫_a^b A(t/ε) dt"""
        if b < a:
            raise ProfileError(f"积分区间非法: [{a}, {b}]")
        if b == a:
            return np.zeros((self.dim, self.dim))
        n1 = self.kernels(b - a, 1)[1]
        return np.einsum("kij,k->ij", self.fourier_matrices(a), n1).real

    def cached(self, key: tuple, builder):
        """按 (t_n mod εP, Δt, …) 精确匹配复用系数"""
        value = self._cache.get(key)
        if value is None:
            value = builder()
            with self._lock:
                if len(self._cache) > 4096:
                    self._cache.clear()
                self._cache.setdefault(key, value)
        return value

    def phase_key(self, t_n: float) -> float:
        return math.fmod(t_n, self.epsilon * self.profile.period)


def _chain_contraction(matrices: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Σ_{k₁…k_j} M_{k₁}⋯M_{k_j}·N(k₁…k_j)"""
    depth = kernel.ndim
    modes = _EINSUM_LETTERS[:depth]
    rows = "pqrstuvw"[:depth + 1]
    operands = [f"{modes[i]}{rows[i]}{rows[i + 1]}" for i in range(depth)]
    expr = ",".join(operands + [modes]) + f"->{rows[0]}{rows[depth]}"
    return np.einsum(expr, *([matrices] * depth), kernel, optimize=True)


def hk_matrices(sys: LinearOscSystem, ctx: StepContext) -> List[np.ndarray]:
    """
    H_k = ∫_{t_n}^{t_{n+1}} A(s₁) ∫_{t_n}^{s₁} A(s₂) … ∫_{t_n}^{s_{k-1}} A(s_k) ds_k … ds₁
    较晚时刻的 A 位于左侧
    """
    if ctx.order > MAX_ORDER:
        raise ProfileError(f"最高支持 {MAX_ORDER} 阶: {ctx.order}")

    def build():
        kernels = sys.kernels(ctx.dt, ctx.order)
        mats = sys.fourier_matrices(ctx.t_n)
        return [_chain_contraction(mats, kernels[j]).real for j in range(1, ctx.order + 1)]

    return sys.cached(("hk", sys.phase_key(ctx.t_n), ctx.dt, ctx.order), build)


def apply_matrix(mat: np.ndarray, U: np.ndarray) -> np.ndarray:
    """对单个状态 (d,) 或批量状态 (N, d) 作用矩阵"""
    return U @ mat.T


def propagate_increment(hks: List[np.ndarray], U: np.ndarray) -> np.ndarray:
    """Σ_k H_k U（显式格式的线性增量，非线性格式共用）"""
    total = apply_matrix(hks[0], U)
    for mat in hks[1:]:
        total = total + apply_matrix(mat, U)
    return total


def step_explicit(sys: LinearOscSystem, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    """U_{n+1} = (I + Σ_{k≤p} H_k) U_n"""
    U = np.asarray(U, dtype=float)
    return U + propagate_increment(hk_matrices(sys, ctx), U)


def solve_midpoint(G: np.ndarray, U: np.ndarray, forcing: Optional[np.ndarray] = None) -> np.ndarray:
    """
    求解 U⁺ = U + G(U⁺+U)/2 + forcing
    即 (I − G/2)U⁺ = (I + G/2)U + forcing
    """
    U = np.asarray(U, dtype=float)
    eye = np.eye(G.shape[0])
    lhs = eye - 0.5 * G
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        logger.error(f"中点格式线性方程组奇异: cond={cond:.3e}")
        raise SingularStepError(f"中点格式矩阵奇异或病态 (cond={cond:.3e})，请减小时间步长")
    rhs = apply_matrix(eye + 0.5 * G, U)
    if forcing is not None:
        rhs = rhs + forcing
    lu = scipy.linalg.lu_factor(lhs)
    return scipy.linalg.lu_solve(lu, rhs.T).T


def step_midpoint_naive(sys: LinearOscSystem, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    """U_{n+1} = U_n + (∫A)(U_{n+1}+U_n)/2"""
    h1 = sys.integral(ctx.t_n, ctx.t_next)
    return solve_midpoint(h1, U)


def midpoint_correction(sys: LinearOscSystem, ctx: StepContext) -> np.ndarray:
    """
    G = H₁ + ½(D_fwd − D_bwd)
    D_fwd = ∫A(s)∫_{t_n}^s A = H₂，D_bwd = ∫A(s)∫_s^{t_{n+1}} A = H₁² − H₂
    """
    def build():
        h1, h2 = hk_matrices(sys, StepContext(ctx.t_n, ctx.dt, 2))
        return h1 + h2 - 0.5 * (h1 @ h1)

    return sys.cached(("mid", sys.phase_key(ctx.t_n), ctx.dt), build)


def step_midpoint_ua(sys: LinearOscSystem, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    return solve_midpoint(midpoint_correction(sys, ctx), U)


def step_averaged_exp_taylor(sys: LinearOscSystem, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    """U_{n+1} = Σ_{k≤p} (Δt⟨A⟩)^k/k! · U_n"""
    U = np.asarray(U, dtype=float)
    step = ctx.dt * sys.averaged()
    term = U
    total = U
    for k in range(1, ctx.order + 1):
        term = apply_matrix(step, term) / k
        total = total + term
    return total


def step_averaged_midpoint(sys: LinearOscSystem, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    """Ū_{n+1} = Ū_n + Δt⟨A⟩(Ū_n + Ū_{n+1})/2"""
    return solve_midpoint(ctx.dt * sys.averaged(), U)


def amplification_matrix(sys: LinearOscSystem, ctx: StepContext) -> np.ndarray:
    """平均中点格式的放大矩阵（Δt⟨A⟩/2 的 Cayley 变换）"""
    half = 0.5 * ctx.dt * sys.averaged()
    eye = np.eye(sys.dim)
    return np.linalg.solve(eye - half, eye + half)


# ---------------------------------------------------------------------------
# 带电粒子模型的分块中点格式
# ---------------------------------------------------------------------------

def _antisymmetric_pair(f: OscPoly, g: OscPoly, t_n: float, dt: float) -> float:
    """K[f,g] = ∫f(s)[∫_{t_n}^s g − ∫_s^{t_{n+1}} g] ds"""
    return (nested_integral([f, g], t_n, dt) - nested_integral([g, f], t_n, dt)).real


def midpoint_particle_blocks(profile: PeriodicProfile, B_amp: float, ctx: StepContext,
                             epsilon: float, reading: BlockReading = BlockReading.PROOF,
                             normalized: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    分块矩阵 𝓑 与 𝓐（θ 以 Bθ 替换；物理模型为 Bθ/2）
    """
    scale = B_amp if normalized else 0.5 * B_amp
    scaled = profile.scaled(scale)
    t_n, dt = ctx.t_n, ctx.dt
    one = OscPoly.constant(1.0, epsilon, profile.period)
    if scale == 0.0:
        theta = OscPoly(epsilon, {}, profile.period)
        theta2 = theta
    else:
        theta = profile_as_oscpoly(scaled, 1, epsilon)
        theta2 = profile_as_oscpoly(scaled, 2, epsilon)

    int_theta = nested_integral([theta], t_n, dt).real if not theta.is_zero() else 0.0
    int_theta2 = nested_integral([theta2], t_n, dt).real if not theta2.is_zero() else 0.0

    def pair(f, g):
        if f.is_zero() or g.is_zero():
            return 0.0
        return _antisymmetric_pair(f, g, t_n, dt)

    if reading == BlockReading.LITERAL:
        def moment(f):
            if f.is_zero():
                return 0.0
            return (nested_integral([f, one], t_n, dt) - dt * nested_integral([f], t_n, dt)).real
    else:
        def moment(f):
            return pair(f, one)

    eye = np.eye(2)
    J = ROTATION_J
    B = np.block([[int_theta * J, dt * eye], [int_theta2 * (J @ J), int_theta * J]])
    a11 = -(pair(theta, theta) + pair(one, theta2)) * eye
    a12 = (moment(theta) + pair(one, theta)) * J
    a21 = -(pair(theta2, theta) + pair(theta, theta2)) * J
    a22 = -(moment(theta2) + pair(theta, theta)) * eye
    A = np.block([[a11, a12], [a21, a22]])
    return B, A


def particle_midpoint_matrix(profile: PeriodicProfile, B_amp: float, ctx: StepContext, epsilon: float,
                             reading: BlockReading = BlockReading.PROOF, normalized: bool = True) -> np.ndarray:
    """𝓑 + ½𝓐"""
    B, A = midpoint_particle_blocks(profile, B_amp, ctx, epsilon, reading, normalized)
    return B + 0.5 * A


def step_midpoint_particles(profile: PeriodicProfile, B_amp: float, ctx: StepContext, U: np.ndarray,
                            epsilon: float, reading: BlockReading = BlockReading.PROOF,
                            normalized: bool = True) -> np.ndarray:
    """(x,q)_{n+1} = (x,q)_n + (𝓑 + ½𝓐)(x,q)_{n+1/2}"""
    G = particle_midpoint_matrix(profile, B_amp, ctx, epsilon, reading, normalized)
    return solve_midpoint(G, U)
