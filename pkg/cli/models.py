"""
实验配置与结果数据模型定义
"""
from datetime import datetime
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from services.errors import ConfigurationError


class ExperimentKind(str, Enum):
    """实验类型（与子命令对应）"""
    CONVERGE = "converge"        # 收敛阶扫描
    DEGENERACY = "degeneracy"    # ε→0 退化到平均格式
    ENERGY = "energy"            # 能量审计
    SPECTRUM = "spectrum"        # 轨迹频谱
    CONFINE = "confine"          # 约束性研究
    LANDAU = "landau"            # 朗道阻尼
    ORACLE = "oracle"            # 预言机自检


class SchemeId(str, Enum):
    """时间格式标识"""
    EXPLICIT1 = "explicit1"
    EXPLICIT2 = "explicit2"
    EXPLICIT3 = "explicit3"
    EXPLICIT4 = "explicit4"
    MIDPOINT_NAIVE = "midpoint_naive"
    MIDPOINT_UA = "midpoint_ua"
    MIDPOINT_BLOCKS = "midpoint_blocks"          # 带电粒子分块中点
    AVERAGED_MIDPOINT = "averaged_midpoint"
    AVERAGED_EXP_TAYLOR = "averaged_exp_taylor"
    NL_ORDER1 = "nl_order1"
    NL_ORDER2 = "nl_order2"
    SAV_UA_CHOICE1 = "sav_ua_choice1"
    SAV_UA_CHOICE2 = "sav_ua_choice2"
    SAV_AVERAGED_TAYLOR = "sav_averaged_taylor"
    SAV_AVERAGED_EXTRAPOLATION = "sav_averaged_extrapolation"
    PIC = "pic"


LINEAR_SCHEMES = {
    SchemeId.EXPLICIT1, SchemeId.EXPLICIT2, SchemeId.EXPLICIT3, SchemeId.EXPLICIT4,
    SchemeId.MIDPOINT_NAIVE, SchemeId.MIDPOINT_UA,
    SchemeId.AVERAGED_MIDPOINT, SchemeId.AVERAGED_EXP_TAYLOR,
}
PARTICLE_ONLY_SCHEMES = {
    SchemeId.MIDPOINT_BLOCKS, SchemeId.SAV_UA_CHOICE1, SchemeId.SAV_UA_CHOICE2,
    SchemeId.SAV_AVERAGED_TAYLOR, SchemeId.SAV_AVERAGED_EXTRAPOLATION,
}
SAV_SCHEMES = {
    SchemeId.SAV_UA_CHOICE1, SchemeId.SAV_UA_CHOICE2,
    SchemeId.SAV_AVERAGED_TAYLOR, SchemeId.SAV_AVERAGED_EXTRAPOLATION,
}


class SystemId(str, Enum):
    """线性部分 A(t/ε)"""
    PARTICLE = "particle"    # 4×4 带电粒子矩阵
    SCALAR = "scalar"        # 标量 U̇ = θ(t/ε)U


class ProfileId(str, Enum):
    """θ 剖面"""
    COSINE = "cosine"
    ONE_PLUS_COSINE = "one_plus_cosine"
    TWO_PLUS_HALF_COS_SQUARED = "two_plus_half_cos_squared"


class PotentialId(str, Enum):
    """外势 φ"""
    NONE = "none"
    QUADRATIC = "quadratic"
    OSCILLATING = "oscillating"                        # 非线性项 g = −∇φ
    CONFINING_OSCILLATING = "confining_oscillating"    # 下有界的镜像势


class RunStatus(str, Enum):
    """运行状态枚举"""
    PENDING = "pending"     # 等待运行
    RUNNING = "running"     # 运行中
    PASSED = "passed"       # 所有门限通过
    FAILED = "failed"       # 至少一个门限未通过
    ERROR = "error"         # 运行出错


class GateRule(BaseModel):
    """验收门限：lower ≤ metrics[metric] ≤ upper"""
    metric: str = Field(..., description="指标名称")
    lower: Optional[float] = Field(None, description="下限（含）")
    upper: Optional[float] = Field(None, description="上限（含）")

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.lower is None and self.upper is None:
            raise ConfigurationError(f"门限 {self.metric} 至少需要一个上下限")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise ConfigurationError(f"门限 {self.metric} 下限大于上限")
        return self


class GateResult(BaseModel):
    """门限判定结果"""
    name: str = Field(..., description="指标名称")
    value: float = Field(..., description="指标值")
    residual: Optional[float] = Field(None, description="拟合残差")
    lower: Optional[float] = Field(None, description="下限")
    upper: Optional[float] = Field(None, description="上限")
    passed: bool = Field(..., description="是否通过")


class PicBlock(BaseModel):
    """PIC 参数块"""
    n1: int = Field(64, description="x₁ 方向网格数（2 的幂）")
    n2: int = Field(4, description="x₂ 方向网格数（2 的幂）")
    particles_per_cell: int = Field(50, description="每个网格单元的粒子数")
    spline_order: int = Field(2, ge=0, le=3, description="B 样条阶数 m")
    dt: float = Field(0.01, gt=0, description="时间步长")
    t_final: float = Field(30.0, gt=0, description="终止时刻")
    xi1: float = Field(0.05, description="x₁ 方向扰动幅度 ξ₁")
    xi2: float = Field(0.0, description="x₂ 方向扰动幅度 ξ₂")
    k1: float = Field(0.5, gt=0, description="x₁ 方向波数 k₁")
    k2: float = Field(6.283185307179586, gt=0, description="x₂ 方向波数 k₂")
    pusher: str = Field("nl_order2", description="粒子推进器：nl_order2 / nl_order1 / sav_ua")
    seed: int = Field(0, description="采样随机种子")
    fit_window: Tuple[float, float] = Field((5.0, 30.0), description="衰减率拟合时间窗")
    expected_rate: Optional[float] = Field(None, description="参考衰减率（缺省使用色散关系预言机）")
    snapshot_every: int = Field(0, ge=0, description="每隔多少步输出相空间快照（0 表示不输出）")

    @field_validator("n1", "n2")
    @classmethod
    def _power_of_two(cls, v):
        if v < 4 or v & (v - 1):
            raise ConfigurationError(f"网格数必须是 ≥ 4 的 2 的幂: {v}")
        return v

    @field_validator("pusher")
    @classmethod
    def _known_pusher(cls, v):
        if v not in ("nl_order2", "nl_order1", "sav_ua"):
            raise ConfigurationError(f"未知推进器: {v}")
        return v


class ExperimentConfig(BaseModel):
    """一次实验的完整参数"""
    id: str = Field(..., min_length=1, description="实验标识（输出目录名）")
    experiment: ExperimentKind = Field(..., description="实验类型")
    scheme: SchemeId = Field(SchemeId.MIDPOINT_UA, description="时间格式")
    system: SystemId = Field(SystemId.PARTICLE, description="线性部分")
    profile: ProfileId = Field(ProfileId.COSINE, description="θ 剖面")
    B: float = Field(1.0, description="磁场幅度 B（θ 以 Bθ 替换）")
    B_list: List[float] = Field(default_factory=list, description="扫描的 B 值（confine / landau / spectrum）")
    eps_list: List[float] = Field(default_factory=lambda: [0.1], description="ε 取值")
    dt_list: List[float] = Field(default_factory=lambda: [0.01], description="Δt 取值")
    T: float = Field(1.0, gt=0, description="终止时刻")
    potential: PotentialId = Field(PotentialId.NONE, description="外势 φ")
    initial_state: List[float] = Field(default_factory=lambda: [1.0, 0.5, -0.5, 1.0], description="初值 U₀")
    reading: str = Field("proof", description="分块中点矩项读法：proof / literal")
    compare: List[SchemeId] = Field(default_factory=list, description="同一次运行中附带比较的格式")
    window: bool = Field(False, description="频谱是否使用 Hann 窗")
    fit_floor: float = Field(1e-13, description="低于该值的误差不参与斜率拟合")
    k_list: List[float] = Field(default_factory=lambda: [0.3, 0.4, 0.5], description="色散预言机波数")
    pic: Optional[PicBlock] = Field(None, description="PIC 参数块")
    gates: List[GateRule] = Field(default_factory=list, description="验收门限")
    output: Optional[str] = Field(None, description="输出子目录（缺省为 id）")

    @field_validator("eps_list", "dt_list")
    @classmethod
    def _non_empty_positive(cls, v):
        if not v:
            raise ConfigurationError("ε / Δt 列表不能为空")
        if any(x <= 0 for x in v):
            raise ConfigurationError(f"ε / Δt 必须为正: {v}")
        return v

    @field_validator("reading")
    @classmethod
    def _known_reading(cls, v):
        if v not in ("proof", "literal"):
            raise ConfigurationError(f"未知读法: {v}")
        return v

    @model_validator(mode="after")
    def _check_references(self):
        schemes = [self.scheme, *self.compare]
        if self.system == SystemId.SCALAR:
            bad = [s.value for s in schemes if s not in LINEAR_SCHEMES]
            if bad:
                raise ConfigurationError(f"标量系统不支持格式: {bad}")
            if len(self.initial_state) != 1:
                raise ConfigurationError("标量系统的初值必须为一维")
        elif len(self.initial_state) != 4 and self.experiment != ExperimentKind.LANDAU:
            raise ConfigurationError("带电粒子系统的初值必须为四维 (x₁, x₂, q₁, q₂)")
        if self.experiment == ExperimentKind.LANDAU:
            if self.pic is None:
                raise ConfigurationError("landau 实验需要 pic 参数块")
            if self.scheme != SchemeId.PIC:
                raise ConfigurationError("landau 实验的格式必须为 pic")
        elif self.scheme == SchemeId.PIC:
            raise ConfigurationError("pic 格式只能用于 landau 实验")
        if self.experiment in (ExperimentKind.CONFINE,) and not self.B_list:
            raise ConfigurationError("confine 实验需要非空 B_list")
        return self

    @property
    def output_name(self) -> str:
        return self.output or self.id

    def B_values(self) -> List[float]:
        return list(self.B_list) if self.B_list else [self.B]


class ExperimentFile(BaseModel):
    """--config 文件：实验列表"""
    experiments: List[ExperimentConfig] = Field(..., min_length=1, description="实验列表")


class RunInfo(BaseModel):
    """运行信息模型"""
    run_id: str = Field(..., description="运行ID")
    experiment: ExperimentKind = Field(..., description="实验类型")
    scheme: str = Field(..., description="时间格式")
    status: RunStatus = Field(..., description="运行状态")
    output_dir: str = Field(..., description="输出目录")
    created_at: datetime = Field(default_factory=datetime.now, description="创建时间")
    updated_at: datetime = Field(default_factory=datetime.now, description="更新时间")
    error_message: Optional[str] = Field(None, description="错误信息")
    gates: List[GateResult] = Field(default_factory=list, description="门限判定")


class RunStatistics(BaseModel):
    """运行统计模型"""
    total: int = Field(0, description="总运行数")
    pending: int = Field(0, description="等待中")
    running: int = Field(0, description="运行中")
    passed: int = Field(0, description="通过")
    failed: int = Field(0, description="未通过")
    error: int = Field(0, description="出错")
