"""
振荡磁场下的 Vlasov-Poisson 粒子网格（PIC）求解
采样、B 样条沉积、谱方法 Poisson 求解、插值以及使用 UA 推进器的耦合时间循环
"""
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
import scipy.fft
import scipy.optimize
import scipy.special
import scipy.stats.qmc
from loguru import logger

from services.errors import ConfigurationError, SamplingError
from services.linear_ua import LinearOscSystem, StepContext
from services.nonlinear_ua import field_forcing, step_nl_order1, step_nl_order2
from services.osc_quadrature import PeriodicProfile
from services.particle_model import PhysState, build_A, j_apply, to_guiding
from services.sav_schemes import BMode, PotentialField, SavState, step_sav_ua

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Grid2D:
    """周期网格，节点位于 (i·dx1, j·dx2)"""
    n1: int
    n2: int
    L1: float
    L2: float

    def __post_init__(self):
        for n in (self.n1, self.n2):
            if n < 4 or n & (n - 1):
                raise ConfigurationError(f"网格数必须为 ≥4 的 2 的幂: {n}")
        if self.L1 <= 0 or self.L2 <= 0:
            raise ConfigurationError(f"区域长度必须为正: ({self.L1}, {self.L2})")

    @classmethod
    def from_wavenumbers(cls, n1: int, n2: int, k1: float, k2: float) -> "Grid2D":
        return cls(n1, n2, TWO_PI / k1, TWO_PI / k2)

    @property
    def dx1(self) -> float:
        return self.L1 / self.n1

    @property
    def dx2(self) -> float:
        return self.L2 / self.n2

    @property
    def cell_area(self) -> float:
        return self.dx1 * self.dx2

    @property
    def lengths(self) -> np.ndarray:
        return np.array([self.L1, self.L2])

    def nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        x1 = self.dx1 * np.arange(self.n1)
        x2 = self.dx2 * np.arange(self.n2)
        return np.meshgrid(x1, x2, indexing="ij")

    def wavenumbers(self, derivative: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """角波数 κ；derivative=True 时 Nyquist 模为零"""
        k1 = TWO_PI * scipy.fft.fftfreq(self.n1, d=self.dx1)
        k2 = TWO_PI * scipy.fft.fftfreq(self.n2, d=self.dx2)
        if derivative:
            k1[self.n1 // 2] = 0.0
            k2[self.n2 // 2] = 0.0
        return k1[:, None], k2[None, :]


@dataclass(frozen=True)
class InitCondition:
    """f_in = (1+ξ₁cos k₁x₁)(1+ξ₂cos k₂x₂)·e^{−|v|²/2}/(2π)"""
    xi1: float
    xi2: float
    k1: float
    k2: float

    def __post_init__(self):
        if abs(self.xi1) >= 1 or abs(self.xi2) >= 1:
            raise ConfigurationError(f"扰动幅度必须满足 |ξ| < 1: ({self.xi1}, {self.xi2})")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigurationError(f"波数必须为正: ({self.k1}, {self.k2})")


@dataclass
class ParticleEnsemble:
    """等权宏粒子（动量为引导变量 q）"""
    positions: np.ndarray
    momenta: np.ndarray
    weight: float
    log_r: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass
class FieldState:
    """网格场：ρ、φ、E = −∇φ 以及 ∂_jE_i"""
    rho: np.ndarray
    phi: np.ndarray
    E: np.ndarray
    grad_E: np.ndarray


class PusherMode(str, Enum):
    """粒子推进格式"""
    NL_ORDER2 = "nl_order2"
    NL_ORDER1 = "nl_order1"
    SAV_UA = "sav_ua"


# ---------------------------------------------------------------------------
# 采样
# ---------------------------------------------------------------------------

def _invert_cdf(u: np.ndarray, xi: float, k: float, length: float) -> np.ndarray:
    """解 x + ξ sin(kx)/k = uL（F 单调，F' ≥ 1 − |ξ| > 0）"""
    target = u * length
    if xi == 0.0:
        return target
    try:
        x = scipy.optimize.newton(lambda x: x + xi * np.sin(k * x) / k - target, target,
                                  fprime=lambda x: 1.0 + xi * np.cos(k * x), tol=1e-12, maxiter=100)
    except RuntimeError as e:
        raise SamplingError(f"逆分布函数求根失败: {e}")
    residual = np.max(np.abs(x + xi * np.sin(k * x) / k - target))
    if not np.isfinite(residual) or residual > 1e-10 * length:
        raise SamplingError(f"逆分布函数求根未收敛: 残差={residual:.2e}")
    return x


def sample_initial(ic: InitCondition, n_particles: int, seed: int = 0,
                   profile: Optional[PeriodicProfile] = None, B_amp: float = 0.0,
                   epsilon: float = 1.0) -> ParticleEnsemble:
    """
    分层准随机均匀数（加扰 Halton 序列）上逆分布函数采样
    x 由单调求根，v 由标准正态逆分布函数，t=0 时转换为 q
    """
    if n_particles < 1:
        raise ConfigurationError(f"粒子数必须 ≥ 1: {n_particles}")
    L1, L2 = TWO_PI / ic.k1, TWO_PI / ic.k2
    sampler = scipy.stats.qmc.Halton(d=4, scramble=True, seed=seed)
    u = np.clip(sampler.random(n_particles), 1e-15, 1.0 - 1e-15)
    x = np.column_stack([
        _invert_cdf(u[:, 0], ic.xi1, ic.k1, L1),
        _invert_cdf(u[:, 1], ic.xi2, ic.k2, L2),
    ])
    x = np.mod(x, [L1, L2])
    v = scipy.special.ndtri(u[:, 2:4])
    profile = profile or PeriodicProfile.constant(0.0)
    guiding = to_guiding(PhysState(x=x, v=v), 0.0, profile, B_amp, epsilon)
    logger.debug(f"粒子采样完成: N={n_particles}, seed={seed}")
    return ParticleEnsemble(positions=guiding.x, momenta=guiding.q, weight=L1 * L2 / n_particles)


# ---------------------------------------------------------------------------
# 形函数、沉积与插值
# ---------------------------------------------------------------------------

def bspline_weights(xp, dx: float, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    m 阶 B 样条在节点上的权重
    返回 (起始节点下标, 形状 (…, m+1) 的权重)，下标未取模
    """
    u = np.asarray(xp, dtype=float) / dx
    if m == 0:
        base = np.floor(u + 0.5)
        weights = np.ones(u.shape + (1,))
    elif m == 1:
        base = np.floor(u)
        f = u - base
        weights = np.stack([1.0 - f, f], axis=-1)
    elif m == 2:
        centre = np.floor(u + 0.5)
        d = u - centre
        base = centre - 1.0
        weights = np.stack([0.5 * (0.5 - d) ** 2, 0.75 - d * d, 0.5 * (0.5 + d) ** 2], axis=-1)
    elif m == 3:
        left = np.floor(u)
        f = u - left
        base = left - 1.0
        f2, f3 = f * f, f * f * f
        weights = np.stack([
            (1.0 - f) ** 3 / 6.0,
            (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
            (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
            f3 / 6.0,
        ], axis=-1)
    else:
        raise ConfigurationError(f"B 样条阶数必须为 0..3: {m}")
    return base.astype(np.int64), weights


def _tensor_stencil(positions: np.ndarray, grid: Grid2D, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """张量积模板：扁平节点下标与权重，形状均为 (N, (m+1)²)"""
    b1, w1 = bspline_weights(positions[:, 0], grid.dx1, m)
    b2, w2 = bspline_weights(positions[:, 1], grid.dx2, m)
    offsets = np.arange(m + 1)
    i1 = np.mod(b1[:, None] + offsets, grid.n1)
    i2 = np.mod(b2[:, None] + offsets, grid.n2)
    flat = (i1[:, :, None] * grid.n2 + i2[:, None, :]).reshape(positions.shape[0], -1)
    weights = (w1[:, :, None] * w2[:, None, :]).reshape(positions.shape[0], -1)
    return flat, weights


def _chunks(count: int, chunk_size: Optional[int]) -> List[slice]:
    size = chunk_size or count or 1
    return [slice(start, min(count, start + size)) for start in range(0, count, size)]


def deposit_density(ens: ParticleEnsemble, grid: Grid2D, m: int = 2, chunk_size: Optional[int] = None,
                    executor: Optional[Executor] = None) -> np.ndarray:
    """
    ρ_node = ω Σ_p S(x_node − x_p) / (dx1·dx2)
    粒子分块写入私有网格，按块顺序合并（结果与线程数无关）
    """
    size = grid.n1 * grid.n2

    def deposit(part: slice) -> np.ndarray:
        flat, weights = _tensor_stencil(ens.positions[part], grid, m)
        return np.bincount(flat.ravel(), weights=weights.ravel(), minlength=size)

    parts = _chunks(ens.count, chunk_size)
    partials = list(executor.map(deposit, parts)) if executor is not None else [deposit(p) for p in parts]
    total = np.zeros(size)
    for partial in partials:
        total += partial
    return total.reshape(grid.n1, grid.n2) * (ens.weight / grid.cell_area)


def solve_poisson(rho: np.ndarray, grid: Grid2D) -> FieldState:
    """
    −Δφ = ρ − mean(ρ)，φ̂(0) = 0，Ê = −iκφ̂
    一阶导数的 Nyquist 模置零
    """
    fluctuation = rho - rho.mean()
    rho_hat = scipy.fft.fft2(fluctuation)
    k1, k2 = grid.wavenumbers()
    k_sq = k1 ** 2 + k2 ** 2
    k_sq[0, 0] = 1.0
    phi_hat = rho_hat / k_sq
    phi_hat[0, 0] = 0.0
    d1, d2 = grid.wavenumbers(derivative=True)
    derivatives = (d1, d2)
    E_hat = [-1j * d * phi_hat for d in derivatives]
    E = np.stack([scipy.fft.ifft2(e).real for e in E_hat])
    grad_E = np.stack([
        np.stack([scipy.fft.ifft2(1j * derivatives[j] * E_hat[i]).real for j in range(2)])
        for i in range(2)
    ])
    return FieldState(rho=rho, phi=scipy.fft.ifft2(phi_hat).real, E=E, grad_E=grad_E)


def interpolate_field(values: np.ndarray, positions: np.ndarray, grid: Grid2D, m: int = 2) -> np.ndarray:
    """
    网格量插值到粒子：values 形状 (…, n1, n2)，返回 (N, …)
    与 deposit_density 使用相同的形函数
    """
    positions = np.atleast_2d(positions)
    lead = values.shape[:-2]
    flat, weights = _tensor_stencil(positions, grid, m)
    table = values.reshape((-1, grid.n1 * grid.n2))
    gathered = np.sum(table[:, flat] * weights[None, :, :], axis=-1)
    return np.moveaxis(gathered, 0, -1).reshape((positions.shape[0],) + lead)


def electric_energy(fields: FieldState, grid: Grid2D) -> float:
    """∬|E|² ≈ Σ_nodes |E|²·dx1·dx2"""
    return float(np.sum(fields.E ** 2) * grid.cell_area)


def total_momentum(ens: ParticleEnsemble) -> np.ndarray:
    """Σ ω q"""
    return ens.weight * np.sum(ens.momenta, axis=0)


def compute_fields(ens: ParticleEnsemble, grid: Grid2D, m: int = 2, chunk_size: Optional[int] = None,
                   executor: Optional[Executor] = None) -> FieldState:
    return solve_poisson(deposit_density(ens, grid, m, chunk_size, executor), grid)


# ---------------------------------------------------------------------------
# 时间推进
# ---------------------------------------------------------------------------

def _grid_potential(fields: FieldState, grid: Grid2D, m: int) -> PotentialField:
    """由网格 φ 插值得到的势（∇φ = −E，∇²φ = −∇E）"""
    return PotentialField(
        phi=lambda x: interpolate_field(fields.phi, x, grid, m),
        grad=lambda x: -interpolate_field(fields.E, x, grid, m),
        hess=lambda x: -interpolate_field(fields.grad_E, x, grid, m),
        name="grid",
    )


def pic_step(ens: ParticleEnsemble, fields: FieldState, grid: Grid2D, profile: PeriodicProfile,
             B_amp: float, epsilon: float, ctx: StepContext, pusher_mode: PusherMode = PusherMode.NL_ORDER2,
             m: int = 2, system: Optional[LinearOscSystem] = None, chunk_size: Optional[int] = None,
             executor: Optional[Executor] = None) -> Tuple[ParticleEnsemble, FieldState]:
    """
    场在步内冻结：用步初的 E 推进粒子（物理系数 B/2、B²/4），
    周期回绕位置并修正 q 以保持 v 连续，然后重新沉积并求解
    """
    system = system or build_A(profile, B_amp, normalized=False, epsilon=epsilon)
    U = np.concatenate([ens.positions, ens.momenta], axis=1)
    log_r = None
    if pusher_mode == PusherMode.SAV_UA:
        potential = _grid_potential(fields, grid, m)
        state = SavState(x=ens.positions, q=ens.momenta,
                         log_r=ens.log_r if ens.log_r is not None else potential.phi(ens.positions))
        state = step_sav_ua(state, profile, B_amp, potential, ctx, epsilon, BMode.CHOICE2, normalized=False)
        U_next = state.as_vector()
        log_r = state.log_r
    else:
        forcing = field_forcing(lambda x: interpolate_field(fields.E, x, grid, m),
                                lambda x: interpolate_field(fields.grad_E, x, grid, m))
        stepper = step_nl_order1 if pusher_mode == PusherMode.NL_ORDER1 else step_nl_order2
        U_next = stepper(system, forcing, ctx, U)

    raw = U_next[:, :2]
    wrapped = np.mod(raw, grid.lengths)
    momenta = U_next[:, 2:4]
    if B_amp != 0.0:
        theta = float(profile.evaluate(ctx.t_next / epsilon))
        momenta = momenta - 0.5 * B_amp * theta * j_apply(wrapped - raw)
    pushed = ParticleEnsemble(positions=wrapped, momenta=momenta, weight=ens.weight, log_r=log_r)
    return pushed, compute_fields(pushed, grid, m, chunk_size, executor)


@dataclass
class PicSettings:
    """一次 PIC 运行的参数"""
    ic: InitCondition
    n1: int = 64
    n2: int = 4
    particles_per_cell: int = 50
    spline_order: int = 2
    dt: float = 0.01
    t_final: float = 30.0
    B_amp: float = 0.0
    epsilon: float = 1e-3
    profile: PeriodicProfile = field(default_factory=PeriodicProfile.cosine)
    pusher: PusherMode = PusherMode.NL_ORDER2
    seed: int = 0
    chunk_size: Optional[int] = 65536
    snapshot_every: int = 0

    @property
    def n_particles(self) -> int:
        return self.particles_per_cell * self.n1 * self.n2


@dataclass
class PicResult:
    """能量时间序列及可选相空间快照"""
    times: np.ndarray
    energies: np.ndarray
    momenta: np.ndarray
    snapshots: List[Tuple[float, np.ndarray]] = field(default_factory=list)


class PicSimulation:
    """PIC 时间循环：沉积 → 求解 → 推进 → 回绕，各阶段之间严格同步"""

    def __init__(self, settings: PicSettings, executor: Optional[Executor] = None, run_logger=None):
        self.settings = settings
        self.executor = executor
        self.log = run_logger or logger
        self.grid = Grid2D.from_wavenumbers(settings.n1, settings.n2, settings.ic.k1, settings.ic.k2)
        self.system = build_A(settings.profile, settings.B_amp, normalized=False, epsilon=settings.epsilon)

    def run(self) -> PicResult:
        s = self.settings
        n_steps = int(round(s.t_final / s.dt))
        self.log.info(f"PIC 运行开始: 网格={s.n1}x{s.n2}, 粒子数={s.n_particles}, B={s.B_amp}, "
                      f"ε={s.epsilon:g}, Δt={s.dt}, 步数={n_steps}, 推进器={s.pusher.value}")
        ens = sample_initial(s.ic, s.n_particles, s.seed, s.profile, s.B_amp, s.epsilon)
        fields = compute_fields(ens, self.grid, s.spline_order, s.chunk_size, self.executor)
        times = [0.0]
        energies = [electric_energy(fields, self.grid)]
        momenta = [total_momentum(ens)]
        snapshots = []
        if s.snapshot_every:
            snapshots.append((0.0, np.hstack([ens.positions, ens.momenta])))
        for n in range(n_steps):
            ctx = StepContext(t_n=n * s.dt, dt=s.dt, order=2)
            ens, fields = pic_step(ens, fields, self.grid, s.profile, s.B_amp, s.epsilon, ctx, s.pusher,
                                   s.spline_order, self.system, s.chunk_size, self.executor)
            t = (n + 1) * s.dt
            times.append(t)
            energies.append(electric_energy(fields, self.grid))
            momenta.append(total_momentum(ens))
            if s.snapshot_every and (n + 1) % s.snapshot_every == 0:
                snapshots.append((t, np.hstack([ens.positions, ens.momenta])))
            if (n + 1) % 500 == 0:
                self.log.debug(f"PIC 进度: t={t:.2f}, 电场能={energies[-1]:.4e}")
        self.log.info(f"PIC 运行结束: 终止电场能={energies[-1]:.4e}")
        return PicResult(times=np.array(times), energies=np.array(energies), momenta=np.array(momenta),
                         snapshots=snapshots)
