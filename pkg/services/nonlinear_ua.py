"""
非线性一致精确格式
U̇ = A(t/ε)U + g(U) 的一阶与二阶显式格式
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from loguru import logger

from services.linear_ua import (
    LinearOscSystem,
    StepContext,
    apply_matrix,
    hk_matrices,
    propagate_increment,
)

ArrayMap = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class NonlinearTerm:
    """
    非线性项 g 及其雅可比矩阵 ∇g
    g 接受 (d,) 或 (N, d)，∇g 返回 (d, d) 或 (N, d, d)
    """
    func: ArrayMap
    dim: int
    jacobian_func: Optional[ArrayMap] = None
    hessian_action: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "custom"
    _fd_warned: bool = field(default=False, repr=False)

    def __call__(self, U: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(U, dtype=float))

    def jacobian(self, U: np.ndarray) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        if self.jacobian_func is not None:
            return self.jacobian_func(U)
        if not self._fd_warned:
            logger.warning(f"非线性项 {self.name} 未提供雅可比矩阵，改用中心差分（精度降低）")
            self._fd_warned = True
        return finite_difference_jacobian(self.func, U)


def finite_difference_jacobian(func: ArrayMap, U: np.ndarray) -> np.ndarray:
    """中心差分，步长 1e-6·(1+|U|)"""
    U = np.asarray(U, dtype=float)
    d = U.shape[-1]
    norm = np.linalg.norm(U, axis=-1, keepdims=True)
    h = 1e-6 * (1.0 + norm)
    columns = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        step = h * e
        columns.append((func(U + step) - func(U - step)) / (2.0 * h))
    return np.stack(columns, axis=-1)


def check_jacobian(term: NonlinearTerm, points: np.ndarray) -> float:
    """∇g 与中心差分的最大相对误差"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    exact = np.asarray(term.jacobian(points))
    approx = finite_difference_jacobian(term.func, points)
    scale = max(1.0, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(exact - approx)) / scale)


# ---------------------------------------------------------------------------
# 常用非线性项
# ---------------------------------------------------------------------------

def zero(dim: int) -> NonlinearTerm:
    return NonlinearTerm(
        func=lambda U: np.zeros_like(U),
        dim=dim,
        jacobian_func=lambda U: np.zeros(U.shape + (dim,)),
        name="zero",
    )


def oscillating_forcing() -> NonlinearTerm:
    """g(x, q) = (0, 0, cos x₁ sin x₂ + x₁ + x₁³, sin x₁ cos x₂ + x₂ + x₂³)"""
    def func(U):
        x1, x2 = U[..., 0], U[..., 1]
        zeros = np.zeros_like(x1)
        return np.stack([
            zeros,
            zeros,
            np.cos(x1) * np.sin(x2) + x1 + x1 ** 3,
            np.sin(x1) * np.cos(x2) + x2 + x2 ** 3,
        ], axis=-1)

    def jac(U):
        x1, x2 = U[..., 0], U[..., 1]
        out = np.zeros(U.shape + (4,))
        cross = np.cos(x1) * np.cos(x2)
        ss = np.sin(x1) * np.sin(x2)
        out[..., 2, 0] = -ss + 1.0 + 3.0 * x1 ** 2
        out[..., 2, 1] = cross
        out[..., 3, 0] = cross
        out[..., 3, 1] = -ss + 1.0 + 3.0 * x2 ** 2
        return out

    return NonlinearTerm(func=func, dim=4, jacobian_func=jac, name="oscillating_forcing")


def from_potential(potential) -> NonlinearTerm:
    """g(x, q) = (0, −∇φ(x))"""
    def func(U):
        x = U[..., :2]
        return np.concatenate([np.zeros_like(x), -potential.grad(x)], axis=-1)

    def jac(U):
        out = np.zeros(U.shape + (4,))
        out[..., 2:4, 0:2] = -potential.hess(U[..., :2])
        return out

    return NonlinearTerm(func=func, dim=4, jacobian_func=jac, name=f"potential:{potential.name}")


def field_forcing(field_at: ArrayMap, gradient_at: ArrayMap) -> NonlinearTerm:
    """
    g(x, q) = (0, E(x))
    field_at(x) → (…, 2)，gradient_at(x) → (…, 2, 2) 且 [i, j] = ∂_j E_i
    """
    def func(U):
        x = U[..., :2]
        return np.concatenate([np.zeros_like(x), field_at(x)], axis=-1)

    def jac(U):
        out = np.zeros(U.shape + (4,))
        out[..., 2:4, 0:2] = gradient_at(U[..., :2])
        return out

    return NonlinearTerm(func=func, dim=4, jacobian_func=jac, name="field_forcing")


# ---------------------------------------------------------------------------
# 格式
# ---------------------------------------------------------------------------

def _jacobian_apply(jac: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", jac, vec)


def step_nl_order1(sys: LinearOscSystem, nl: NonlinearTerm, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    """U_{n+1} = U_n + (∫A)U_n + Δt·g(U_n)"""
    U = np.asarray(U, dtype=float)
    h1 = hk_matrices(sys, StepContext(ctx.t_n, ctx.dt, 1))
    return U + propagate_increment(h1, U) + ctx.dt * nl(U)


def htilde(sys: LinearOscSystem, ctx: StepContext, U: np.ndarray, g_n: np.ndarray, s: float) -> np.ndarray:
    """h̃(s) = (∫_{t_n}^s A)U_n + (s − t_n)g_n"""
    if s < ctx.t_n or s > ctx.t_next:
        raise ValueError(f"s 必须位于 [{ctx.t_n}, {ctx.t_next}]: {s}")
    return apply_matrix(sys.integral(ctx.t_n, s), np.asarray(U, float)) + (s - ctx.t_n) * np.asarray(g_n, float)


def forcing_moments(sys: LinearOscSystem, ctx: StepContext):
    """
    (∫A(s)(s−t_n)ds, ∫_{t_n}^{t_{n+1}}∫_{t_n}^s A)
    分别作用于 g_n 与 ∫h̃ 中的 U_n
    """
    def build():
        kernels = sys.kernels(ctx.dt, 2)[2]
        mats = sys.fourier_matrices(ctx.t_n)
        zero_index = sys.modes.index(0)
        weight_outer = np.einsum("kij,k->ij", mats, kernels[:, zero_index]).real
        weight_inner = np.einsum("kij,k->ij", mats, kernels[zero_index, :]).real
        return weight_outer, weight_inner

    return sys.cached(("nl2", sys.phase_key(ctx.t_n), ctx.dt), build)


def step_nl_order2(sys: LinearOscSystem, nl: NonlinearTerm, ctx: StepContext, U: np.ndarray) -> np.ndarray:
    """
    U_{n+1} = U_n + H₁U_n + H₂U_n + (∫A·(s−t_n))g_n + Δt·g_n + ∇g(U_n)·∫h̃
    ∫h̃ = (∫∫A)U_n + Δt²/2·g_n
    """
    U = np.asarray(U, dtype=float)
    hks = hk_matrices(sys, StepContext(ctx.t_n, ctx.dt, 2))
    outer, inner = forcing_moments(sys, ctx)
    g_n = nl(U)
    h_int = apply_matrix(inner, U) + 0.5 * ctx.dt * ctx.dt * g_n
    forcing = apply_matrix(outer, g_n) + ctx.dt * g_n + _jacobian_apply(nl.jacobian(U), h_int)
    return U + propagate_increment(hks, U) + forcing
