"""
振荡积分服务
在 c·t^j·e^{i2πkt/(Pε)} 项构成的代数中精确计算各格式系数所需的单重与多重时间积分
"""
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.fft
from numpy.polynomial import polynomial as npoly
from loguru import logger

from services.errors import ProfileError

TWO_PI = 2.0 * math.pi


@dataclass
class QuadratureOptions:
    """振荡积分选项"""
    taylor_threshold: float = 4.0  # 单位区间上总频率不超过该值时改用泰勒多项式
    taylor_degree: int = 40
    prune_tolerance: float = 1e-15


_options = QuadratureOptions()


def configure_quadrature(taylor_threshold: Optional[float] = None,
                         taylor_degree: Optional[int] = None,
                         prune_tolerance: Optional[float] = None) -> QuadratureOptions:
    """更新全局积分选项（清空核缓存）"""
    if taylor_threshold is not None:
        _options.taylor_threshold = float(taylor_threshold)
    if taylor_degree is not None:
        _options.taylor_degree = int(taylor_degree)
    if prune_tolerance is not None:
        _options.prune_tolerance = float(prune_tolerance)
    get_kernel_cache().clear()
    logger.debug(f"振荡积分选项已更新: {_options}")
    return _options


# ---------------------------------------------------------------------------
# 周期函数 θ
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PeriodicProfile:
    """
    P 周期函数 θ 的傅里叶系数表示
    θ(s) = Σ_{|k|≤K} C_k e^{i2πks/P}
    """
    coeffs: Mapping[int, complex]
    period: float = TWO_PI
    cutoff: Optional[int] = None
    name: str = "custom"
    _power_cache: Dict[int, Dict[int, complex]] = field(default_factory=dict, repr=False)
    _power_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.period <= 0:
            raise ProfileError(f"周期必须为正: {self.period}")
        cleaned = {int(k): complex(c) for k, c in self.coeffs.items() if c != 0}
        cutoff = max((abs(k) for k in cleaned), default=0) if self.cutoff is None else int(self.cutoff)
        if cutoff < 0:
            raise ProfileError(f"截断阶数必须非负: {cutoff}")
        cleaned = {k: c for k, c in cleaned.items() if abs(k) <= cutoff}
        scale = max((abs(c) for c in cleaned.values()), default=0.0)
        for k, c in cleaned.items():
            if abs(cleaned.get(-k, 0.0) - c.conjugate()) > 1e-12 * max(scale, 1.0):
                raise ProfileError(f"傅里叶系数不满足共轭对称 (k={k})，θ 必须为实函数")
        object.__setattr__(self, "coeffs", cleaned)
        object.__setattr__(self, "cutoff", cutoff)

    # 常用构造

    @classmethod
    def constant(cls, value: float, period: float = TWO_PI) -> "PeriodicProfile":
        return cls({0: value}, period=period, name=f"const({value:g})")

    @classmethod
    def cosine(cls) -> "PeriodicProfile":
        """θ(s) = cos s"""
        return cls({1: 0.5, -1: 0.5}, name="cos")

    @classmethod
    def one_plus_cosine(cls) -> "PeriodicProfile":
        """θ(s) = 1 + cos s"""
        return cls({0: 1.0, 1: 0.5, -1: 0.5}, name="1+cos")

    @classmethod
    def two_plus_half_cos_squared(cls) -> "PeriodicProfile":
        """θ(s) = 2 + 0.5cos² s = 2.25 + 0.25cos 2s"""
        return cls({0: 2.25, 2: 0.125, -2: 0.125}, name="2+0.5cos^2")

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray], np.ndarray], cutoff: int,
                      period: float = TWO_PI, samples: Optional[int] = None) -> "PeriodicProfile":
        """
        对一般周期函数采样并保留 |k| ≤ cutoff 的模态
        截断误差由调用方负责评估
        """
        if cutoff < 0:
            raise ProfileError(f"截断阶数必须非负: {cutoff}")
        n = samples or max(8 * cutoff + 8, 64)
        s = period * np.arange(n) / n
        values = np.asarray(func(s), dtype=float)
        spectrum = scipy.fft.fft(values) / n
        coeffs = {}
        for k in range(-cutoff, cutoff + 1):
            c = 0.5 * (spectrum[k % n] + np.conj(spectrum[-k % n]))
            if abs(c) > 1e-16:
                coeffs[k] = complex(c)
        logger.debug(f"周期函数采样完成: 样本数={n}, 保留模态={len(coeffs)}")
        return cls(coeffs, period=period, cutoff=cutoff, name="sampled")

    def scaled(self, factor: float) -> "PeriodicProfile":
        """θ → factor·θ"""
        return PeriodicProfile({k: factor * c for k, c in self.coeffs.items()}, period=self.period,
                               cutoff=self.cutoff, name=f"{factor:g}*{self.name}")

    def evaluate(self, s):
        s = np.asarray(s, dtype=float)
        total = np.zeros(s.shape, dtype=complex)
        for k, c in self.coeffs.items():
            total = total + c * np.exp(1j * TWO_PI * k * s / self.period)
        return total.real

    def power_coeffs(self, m: int) -> Dict[int, complex]:
        """θ^m 的傅里叶系数（m 重自卷积，|k| ≤ m·K 精确）"""
        if m < 0:
            raise ProfileError(f"幂次必须非负: {m}")
        if m in self._power_cache:
            return self._power_cache[m]
        if m == 0:
            result = {0: 1.0 + 0.0j}
        else:
            previous = self.power_coeffs(m - 1)
            result: Dict[int, complex] = {}
            for ka, ca in previous.items():
                for kb, cb in self.coeffs.items():
                    result[ka + kb] = result.get(ka + kb, 0.0) + ca * cb
            result = {k: c for k, c in result.items() if c != 0}
        with self._power_lock:
            return self._power_cache.setdefault(m, result)


def power_average(profile: PeriodicProfile, m: int) -> float:
    """⟨θ^m⟩：m 重自卷积的常数模态"""
    if m < 1:
        raise ProfileError(f"平均幂次必须 ≥ 1: {m}")
    return float(profile.power_coeffs(m).get(0, 0.0).real)


# ---------------------------------------------------------------------------
# OscPoly 代数
# ---------------------------------------------------------------------------

def _canonical(modes: Mapping[int, np.ndarray]) -> Dict[int, np.ndarray]:
    arrays = {}
    for k, a in modes.items():
        a = np.atleast_1d(np.asarray(a, dtype=complex))
        if a.size:
            arrays[int(k)] = a
    peak = max((float(np.max(np.abs(a))) for a in arrays.values()), default=0.0)
    if peak == 0.0:
        return {}
    cut = _options.prune_tolerance * peak
    out = {}
    for k, a in arrays.items():
        a = np.where(np.abs(a) < cut, 0.0, a)
        nonzero = np.nonzero(a)[0]
        if nonzero.size:
            out[k] = a[:nonzero[-1] + 1].copy()
    return out


def _add_into(target: Dict[int, np.ndarray], k: int, coeffs: np.ndarray):
    current = target.get(k)
    if current is None:
        target[k] = np.array(coeffs, dtype=complex)
        return
    n = max(current.size, coeffs.size)
    merged = np.zeros(n, dtype=complex)
    merged[:current.size] += current
    merged[:coeffs.size] += coeffs
    target[k] = merged


class OscPoly:
    """
    Σ c·t^j·e^{i2πkt/(Pε)} 的典范表示（每个 (j,k) 至多一项）
    对加法、乘法、原函数封闭；P=2π 时模态 k 即 e^{ikt/ε}
    """

    __slots__ = ("epsilon", "period", "_modes")

    def __init__(self, epsilon: float, modes: Optional[Mapping[int, np.ndarray]] = None,
                 period: float = TWO_PI):
        if epsilon <= 0:
            raise ProfileError(f"ε 必须为正: {epsilon}")
        self.epsilon = float(epsilon)
        self.period = float(period)
        self._modes = _canonical(modes or {})

    @classmethod
    def from_terms(cls, epsilon: float, terms: Iterable[Tuple[complex, int, int]],
                   period: float = TWO_PI) -> "OscPoly":
        """由 (系数, 多项式次数 j, 模态 k) 列表构造，同类项合并"""
        modes: Dict[int, np.ndarray] = {}
        for c, j, k in terms:
            if j < 0:
                raise ProfileError(f"多项式次数必须非负: {j}")
            coeffs = np.zeros(j + 1, dtype=complex)
            coeffs[j] = c
            _add_into(modes, k, coeffs)
        return cls(epsilon, modes, period)

    @classmethod
    def constant(cls, value: complex, epsilon: float, period: float = TWO_PI) -> "OscPoly":
        return cls(epsilon, {0: np.array([value], dtype=complex)}, period)

    @property
    def modes(self) -> Dict[int, np.ndarray]:
        return {k: a.copy() for k, a in self._modes.items()}

    @property
    def terms(self) -> List[Tuple[complex, int, int]]:
        return [(complex(c), j, k) for k in sorted(self._modes)
                for j, c in enumerate(self._modes[k]) if c != 0]

    def is_zero(self) -> bool:
        return not self._modes

    def frequency(self, k: int) -> float:
        return TWO_PI * k / (self.period * self.epsilon)

    def max_frequency(self) -> float:
        return max((abs(self.frequency(k)) for k in self._modes), default=0.0)

    def degree(self) -> int:
        return max((a.size - 1 for a in self._modes.values()), default=0)

    def _same_algebra(self, other: "OscPoly"):
        if other.epsilon != self.epsilon or other.period != self.period:
            raise ProfileError("OscPoly 运算要求相同的 ε 与周期")

    def _wrap(self, modes) -> "OscPoly":
        return OscPoly(self.epsilon, modes, self.period)

    def __add__(self, other):
        modes = self.modes
        if isinstance(other, OscPoly):
            self._same_algebra(other)
            for k, a in other._modes.items():
                _add_into(modes, k, a)
        else:
            _add_into(modes, 0, np.array([complex(other)]))
        return self._wrap(modes)

    __radd__ = __add__

    def __neg__(self):
        return self._wrap({k: -a for k, a in self._modes.items()})

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, OscPoly):
            return self._wrap({k: complex(other) * a for k, a in self._modes.items()})
        self._same_algebra(other)
        modes: Dict[int, np.ndarray] = {}
        for ka, a in self._modes.items():
            for kb, b in other._modes.items():
                _add_into(modes, ka + kb, npoly.polymul(a, b))
        return self._wrap(modes)

    __rmul__ = __mul__

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        total = np.zeros(t_arr.shape, dtype=complex)
        for k, a in self._modes.items():
            poly = npoly.polyval(t_arr, a)
            if k == 0:
                total = total + poly
            else:
                total = total + np.exp(1j * self.frequency(k) * t_arr) * poly
        return complex(total) if total.ndim == 0 else total

    def antiderivative(self) -> "OscPoly":
        """
        原函数（不含积分常数）
        k=0 时次数加一；k≠0 时由 iλQ_j + (j+1)Q_{j+1} = a_j 自高次向低次回代
        """
        modes = {}
        for k, a in self._modes.items():
            if k == 0:
                modes[k] = npoly.polyint(a)
                continue
            i_lam = 1j * self.frequency(k)
            q = np.zeros(a.size, dtype=complex)
            q[-1] = a[-1] / i_lam
            for j in range(a.size - 2, -1, -1):
                q[j] = (a[j] - (j + 1) * q[j + 1]) / i_lam
            modes[k] = q
        return self._wrap(modes)

    def derivative(self) -> "OscPoly":
        modes = {}
        for k, a in self._modes.items():
            d = npoly.polyder(a) if a.size > 1 else np.zeros(1, dtype=complex)
            if k != 0:
                d = npoly.polyadd(d, 1j * self.frequency(k) * a)
            modes[k] = d
        return self._wrap(modes)

    def shifted(self, t0: float) -> "OscPoly":
        """τ ↦ p(t0 + τ)"""
        if t0 == 0.0:
            return self
        cycles = t0 / (self.period * self.epsilon)
        modes = {}
        for k, a in self._modes.items():
            phase = np.exp(1j * TWO_PI * math.fmod(k * cycles, 1.0)) if k else 1.0
            if a.size > 1:
                a = np.polynomial.Polynomial(a)(np.polynomial.Polynomial([t0, 1.0])).coef
            modes[k] = phase * np.asarray(a, dtype=complex)
        return self._wrap(modes)

    def rescaled(self, factor: float) -> "OscPoly":
        """u ↦ p(factor·u)，ε → ε/factor"""
        if factor <= 0:
            raise ProfileError(f"缩放因子必须为正: {factor}")
        modes = {k: a * factor ** np.arange(a.size) for k, a in self._modes.items()}
        return OscPoly(self.epsilon / factor, modes, self.period)

    def expanded(self, degree: int) -> "OscPoly":
        """以 degree 次泰勒多项式代替各指数因子，结果只含 k=0 模态"""
        n = np.arange(degree + 1)
        factorials = np.array([math.factorial(int(i)) for i in n], dtype=float)
        total: Dict[int, np.ndarray] = {}
        for k, a in self._modes.items():
            if k == 0:
                _add_into(total, 0, a)
                continue
            series = (1j * self.frequency(k)) ** n / factorials
            _add_into(total, 0, npoly.polymul(a, series)[:degree + a.size])
        return self._wrap(total)

    def truncated(self, degree: int) -> "OscPoly":
        return self._wrap({k: a[:degree + 1] for k, a in self._modes.items()})

    def __repr__(self):
        return f"OscPoly(epsilon={self.epsilon:g}, terms={len(self.terms)})"


def profile_as_oscpoly(profile: PeriodicProfile, m: int, epsilon: float,
                       origin: float = 0.0) -> OscPoly:
    """将 θ((origin+τ)/ε)^m 提升为 τ 的 OscPoly"""
    if m <= 0:
        raise ProfileError(f"幂次必须为正: {m}")
    if epsilon <= 0:
        raise ProfileError(f"ε 必须为正: {epsilon}")
    terms = [(c, 0, k) for k, c in profile.power_coeffs(m).items()]
    poly = OscPoly.from_terms(epsilon, terms, profile.period)
    return poly.shifted(origin)


def antiderivative(p: OscPoly) -> OscPoly:
    return p.antiderivative()


def _to_unit_interval(seq: Sequence[OscPoly], t_n: float, dt: float) -> Tuple[List[OscPoly], Optional[int]]:
    local = [p.shifted(t_n).rescaled(dt) for p in seq]
    budget = sum(p.max_frequency() for p in local)
    if budget <= _options.taylor_threshold:
        cap = _options.taylor_degree + 4 * len(seq) + max(p.degree() for p in local)
        return [p.expanded(_options.taylor_degree) for p in local], cap
    return local, None


def nested_integral(seq: Sequence[OscPoly], t_n: float, dt: float) -> complex:
    """
    ∫_{t_n}^{t_n+dt} p₁(s₁) ∫_{t_n}^{s₁} p₂(s₂) … ∫_{t_n}^{s_{k-1}} p_k(s_k) ds_k … ds₁
    由内向外逐层求原函数；在单位区间上计算后乘以 dt^k
    """
    if not seq:
        raise ProfileError("嵌套积分序列不能为空")
    if dt <= 0:
        raise ProfileError(f"时间步长必须为正: {dt}")
    for p in seq[1:]:
        seq[0]._same_algebra(p)
    local, cap = _to_unit_interval(seq, t_n, dt)
    inner = OscPoly.constant(1.0, local[0].epsilon, local[0].period)
    for p in reversed(local):
        primitive = (p * inner).antiderivative()
        inner = primitive - primitive(0.0)
        if cap is not None:
            inner = inner.truncated(cap)
    return complex(inner(1.0)) * dt ** len(seq)


def definite_integral(p: OscPoly, a: float, b: float) -> complex:
    """∫_a^b p(t) dt"""
    if b < a:
        raise ProfileError(f"积分区间非法: [{a}, {b}]")
    if b == a:
        return 0.0 + 0.0j
    return nested_integral([p], a, b - a)


# ---------------------------------------------------------------------------
# 与相位无关的指数核
# ---------------------------------------------------------------------------

class KernelCache:
    """指数核缓存（单写多读）"""

    def __init__(self, max_entries: int = 256):
        self._lock = threading.Lock()
        self._entries: Dict[tuple, Dict[int, np.ndarray]] = {}
        self.max_entries = max_entries

    def get(self, key):
        return self._entries.get(key)

    def put(self, key, value):
        with self._lock:
            if len(self._entries) >= self.max_entries:
                self._entries.pop(next(iter(self._entries)))
            self._entries.setdefault(key, value)
        return self._entries[key]

    def clear(self):
        with self._lock:
            self._entries.clear()

    def __len__(self):
        return len(self._entries)


_kernel_cache: Optional[KernelCache] = None


def get_kernel_cache() -> KernelCache:
    """获取指数核缓存单例"""
    global _kernel_cache
    if _kernel_cache is None:
        _kernel_cache = KernelCache()
    return _kernel_cache


def exponential_kernels(modes: Sequence[int], depth: int, epsilon: float, period: float,
                        dt: float) -> Dict[int, np.ndarray]:
    """
    N_j[i₁…i_j] = ∫_0^{dt} e_{k₁}(s₁) ∫_0^{s₁} e_{k₂}(s₂) … ds，k_r = modes[i_r]
    e_k(s) = e^{i2πks/(Pε)}；对 j = 1..depth 返回形状 (n,)*j 的复数组
    后缀原函数按键记忆，同一后缀只积分一次
    """
    if depth < 1:
        raise ProfileError(f"嵌套深度必须 ≥ 1: {depth}")
    if dt <= 0:
        raise ProfileError(f"时间步长必须为正: {dt}")
    modes = tuple(int(k) for k in modes)
    key = (modes, depth, float(epsilon), float(period), float(dt))
    cache = get_kernel_cache()
    cached = cache.get(key)
    if cached is not None:
        return cached

    unit_eps = epsilon / dt
    basis = {k: OscPoly.from_terms(unit_eps, [(1.0, 0, k)], period) for k in modes}
    budget = depth * max(p.max_frequency() for p in basis.values())
    cap = None
    if budget <= _options.taylor_threshold:
        basis = {k: p.expanded(_options.taylor_degree) for k, p in basis.items()}
        cap = _options.taylor_degree + 4 * depth

    one = OscPoly.constant(1.0, unit_eps, period)
    suffixes: Dict[tuple, OscPoly] = {(): one}
    kernels: Dict[int, np.ndarray] = {}
    n = len(modes)
    for j in range(1, depth + 1):
        values = np.empty((n,) * j, dtype=complex)
        for index in itertools.product(range(n), repeat=j):
            word = tuple(modes[i] for i in index)
            primitive = (basis[word[0]] * suffixes[word[1:]]).antiderivative()
            inner = primitive - primitive(0.0)
            if cap is not None:
                inner = inner.truncated(cap)
            if j < depth:
                suffixes[word] = inner
            values[index] = inner(1.0) * dt ** j
        kernels[j] = values
    logger.debug(f"指数核已计算: 模态={modes}, 深度={depth}, ε={epsilon:g}, Δt={dt:g}, "
                 f"泰勒展开={'是' if cap is not None else '否'}")
    return cache.put(key, kernels)


# ---------------------------------------------------------------------------
# 平均值渐近展开残差
# ---------------------------------------------------------------------------

def lemma_residuals(profile: PeriodicProfile, epsilon: float, t_n: float, dt: float) -> Dict[str, float]:
    """
    高振荡函数平均值展开的五个残差
    id1: ∫θ − Δt⟨θ⟩
    id2: ∫∫_{t₁<t} θ(t₁) − Δt²⟨θ⟩/2
    id3: ∫∫_{t<t₁} θ(t₁) − Δt²⟨θ⟩/2
    id4: ∫θ(t)(t−t_n) − Δt²⟨θ⟩/2
    id5: ∫θ(t)(t_{n+1}−t) − Δt²⟨θ⟩/2
    """
    avg = power_average(profile, 1)
    theta = profile_as_oscpoly(profile, 1, epsilon)
    one = OscPoly.constant(1.0, epsilon, profile.period)
    ramp = OscPoly.from_terms(epsilon, [(1.0, 1, 0), (-t_n, 0, 0)], profile.period)
    t_next = t_n + dt
    back_ramp = OscPoly.from_terms(epsilon, [(-1.0, 1, 0), (t_next, 0, 0)], profile.period)
    half = 0.5 * dt * dt * avg
    values = {
        "id1": definite_integral(theta, t_n, t_next) - dt * avg,
        "id2": nested_integral([one, theta], t_n, dt) - half,
        "id3": nested_integral([theta, one], t_n, dt) - half,
        "id4": definite_integral(theta * ramp, t_n, t_next) - half,
        "id5": definite_integral(theta * back_ramp, t_n, t_next) - half,
    }
    return {name: float(abs(v.real)) for name, v in values.items()}


def lemma_bounds(profile: PeriodicProfile, epsilon: float, dt: float) -> Dict[str, float]:
    """上述残差的傅里叶上界：O(ε) 与 O(Δt·ε)"""
    weights = [(abs(c), TWO_PI * abs(k) / profile.period) for k, c in profile.coeffs.items() if k != 0]
    first = sum(c / w for c, w in weights)
    second = sum(c / (w * w) for c, w in weights)
    single = 2.0 * epsilon * first
    double = epsilon * dt * first + 2.0 * epsilon * epsilon * second
    return {"id1": single, "id2": double, "id3": double, "id4": double, "id5": double}
