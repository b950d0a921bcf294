"""
异常定义
数值服务层抛出的错误类型
"""


class UapicError(Exception):
    """所有数值服务异常的基类"""


class ProfileError(UapicError, ValueError):
    """周期函数或幂次参数非法"""


class SingularStepError(UapicError):
    """中点格式线性方程组奇异（时间步过大）"""


class NonOscillatorySpectrumError(UapicError):
    """平均矩阵的谱不是纯虚数"""


class ReferenceBudgetError(UapicError):
    """参考解计算量超出预算"""


class ReferenceGateError(UapicError):
    """参考解自收敛检验未通过"""


class QuadratureToleranceError(UapicError):
    """自适应积分未达到要求的误差"""


class DispersionConvergenceError(UapicError):
    """色散关系求根不收敛"""


class TooFewPeaksError(UapicError):
    """拟合窗口内峰值数量不足"""


class SamplingError(UapicError):
    """粒子初始采样失败"""


class ConfigurationError(UapicError, ValueError):
    """实验配置无法解析"""
