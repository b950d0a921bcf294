"""
带电粒子模型
J 代数、v↔q 变量替换、A 矩阵构造、哈密顿量以及平均模型的频谱分析
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger

from services.errors import NonOscillatorySpectrumError
from services.linear_ua import ROTATION_J, LinearOscSystem
from services.osc_quadrature import PeriodicProfile, power_average

J = ROTATION_J
SPECTRUM_TOLERANCE = 1e-9


@dataclass
class GuidingState:
    """引导变量 (x, q)，支持批量（首维为粒子）"""
    x: np.ndarray
    q: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.x, float), np.asarray(self.q, float)], axis=-1)

    @classmethod
    def from_vector(cls, U: np.ndarray) -> "GuidingState":
        U = np.asarray(U, dtype=float)
        return cls(x=U[..., :2].copy(), q=U[..., 2:4].copy())


@dataclass
class PhysState:
    """实验室变量 (x, v)"""
    x: np.ndarray
    v: np.ndarray


def j_apply(a: np.ndarray) -> np.ndarray:
    """J(a₁, a₂) = (a₂, −a₁)"""
    a = np.asarray(a, dtype=float)
    return np.stack([a[..., 1], -a[..., 0]], axis=-1)


def field_scale(B_amp: float, normalized: bool) -> float:
    """归一化模型取 B，物理模型取 B/2"""
    return float(B_amp) if normalized else 0.5 * float(B_amp)


def _rotation_shift(x: np.ndarray, t: float, profile: PeriodicProfile, B_amp: float, epsilon: float) -> np.ndarray:
    theta = float(profile.evaluate(t / epsilon))
    return 0.5 * B_amp * theta * j_apply(x)


def to_guiding(s: PhysState, t: float, profile: PeriodicProfile, B_amp: float, epsilon: float) -> GuidingState:
    """q = v − (B/2)θ(t/ε)Jx"""
    x = np.asarray(s.x, dtype=float)
    return GuidingState(x=x.copy(), q=np.asarray(s.v, float) - _rotation_shift(x, t, profile, B_amp, epsilon))


def from_guiding(s: GuidingState, t: float, profile: PeriodicProfile, B_amp: float, epsilon: float) -> PhysState:
    """v = q + (B/2)θ(t/ε)Jx"""
    x = np.asarray(s.x, dtype=float)
    return PhysState(x=x.copy(), v=np.asarray(s.q, float) + _rotation_shift(x, t, profile, B_amp, epsilon))


def build_A(profile: PeriodicProfile, B_amp: float, normalized: bool = True,
            epsilon: float = 1.0) -> LinearOscSystem:
    """
    A = [[cθJ, I], [c²θ²J², cθJ]]
    归一化模型 c = B，物理模型 c = B/2
    """
    c = field_scale(B_amp, normalized)
    zero = np.zeros((2, 2))
    eye = np.eye(2)
    components = {
        0: np.block([[zero, eye], [zero, zero]]),
        1: c * np.block([[J, zero], [zero, J]]),
        2: (c * c) * np.block([[zero, zero], [J @ J, zero]]),
    }
    return LinearOscSystem(components, profile, epsilon)


def scaled_averages(profile: PeriodicProfile, B_amp: float, normalized: bool = True) -> Tuple[float, float]:
    """(c⟨θ⟩, c²⟨θ²⟩)"""
    c = field_scale(B_amp, normalized)
    return c * power_average(profile, 1), (c * c) * power_average(profile, 2)


def averaged_particle_matrix(theta_avg: float, theta2_avg: float) -> np.ndarray:
    """⟨A⟩ = [[⟨θ⟩J, I], [⟨θ²⟩J², ⟨θ⟩J]]"""
    eye = np.eye(2)
    return np.block([[theta_avg * J, eye], [theta2_avg * (J @ J), theta_avg * J]])


def _span_ij(block: np.ndarray) -> Optional[Tuple[float, float]]:
    """若 2×2 块属于 span{I, J}，返回 (p, r) 使 block = pI + rJ"""
    p = 0.5 * (block[0, 0] + block[1, 1])
    r = 0.5 * (block[0, 1] - block[1, 0])
    residual = block - (p * np.eye(2) + r * J)
    scale = max(1.0, float(np.max(np.abs(block))))
    if np.max(np.abs(residual)) > 1e-14 * scale:
        return None
    return p, r


def _block_reduced_eigenvalues(avg: np.ndarray) -> Optional[np.ndarray]:
    """
    块结构 [[p₁₁I+r₁₁J, …]] 在 J 的 ±i 特征子空间上化为两个 2×2 复矩阵
    J → iσ，σ = ±1，再用二次方程求根
    """
    if avg.shape != (4, 4):
        return None
    blocks = {}
    for i in range(2):
        for j in range(2):
            pr = _span_ij(avg[2 * i:2 * i + 2, 2 * j:2 * j + 2])
            if pr is None:
                return None
            blocks[i, j] = pr
    roots = []
    for sigma in (1.0, -1.0):
        m = {key: p + 1j * sigma * r for key, (p, r) in blocks.items()}
        trace = m[0, 0] + m[1, 1]
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        disc = np.sqrt(trace * trace / 4.0 - det + 0j)
        roots.extend([trace / 2.0 + disc, trace / 2.0 - disc])
    return np.array(roots)


def averaged_frequencies(sys: LinearOscSystem) -> List[float]:
    """⟨A⟩ 特征值虚部的绝对值（去重，升序）"""
    avg = sys.averaged()
    eigenvalues = _block_reduced_eigenvalues(avg)
    if eigenvalues is None:
        logger.debug("⟨A⟩ 不具备 J 分块结构，改用通用特征值求解")
        eigenvalues = np.linalg.eigvals(avg)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    if np.max(np.abs(eigenvalues.real)) > SPECTRUM_TOLERANCE * scale:
        raise NonOscillatorySpectrumError(f"⟨A⟩ 的谱不是纯虚数: {eigenvalues}")
    freqs: List[float] = []
    for value in sorted(np.abs(eigenvalues.imag)):
        if not freqs or abs(value - freqs[-1]) > SPECTRUM_TOLERANCE:
            freqs.append(float(value))
    return freqs


def hamiltonians(s: GuidingState, field, theta_avg: float, theta2_avg: float) -> Tuple[float, float, float]:
    """
    H₁ = ½|q|² + ½⟨θ²⟩|x|²，H₂ = ⟨θ⟩q·Jx，H = H₁ + H₂ + φ(x)
    field 为 None 时 φ ≡ 0
    """
    x = np.asarray(s.x, dtype=float)
    q = np.asarray(s.q, dtype=float)
    h1 = 0.5 * np.sum(q * q, axis=-1) + 0.5 * theta2_avg * np.sum(x * x, axis=-1)
    h2 = theta_avg * np.sum(q * j_apply(x), axis=-1)
    potential = 0.0 if field is None else field.phi(x)
    return h1 + h2 + potential, h1, h2


def averaged_rhs(theta_avg: float, theta2_avg: float, field=None) -> Callable[[float, np.ndarray], np.ndarray]:
    """平均哈密顿流：ẋ = q + ⟨θ⟩Jx，q̇ = ⟨θ⟩Jq + ⟨θ²⟩J²x − ∇φ(x)"""
    def rhs(t: float, U: np.ndarray) -> np.ndarray:
        x, q = U[..., :2], U[..., 2:4]
        dq = theta_avg * j_apply(q) - theta2_avg * x
        if field is not None:
            dq = dq - field.grad(x)
        return np.concatenate([q + theta_avg * j_apply(x), dq], axis=-1)

    return rhs
