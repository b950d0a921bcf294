"""
配置管理模块
负责加载、保存和管理运行配置
使用 SQLite 数据库存储配置，环境变量 UAPIC_* 可覆盖运行目录与线程数
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from loguru import logger
from pydantic_settings import BaseSettings, SettingsConfigDict

PROJECT_DIR = Path(__file__).parent


@dataclass
class RuntimeConfig:
    """运行环境配置"""
    threads: int = 1
    output_dir: str = "results"
    log_dir: str = "logs"
    data_dir: str = "data"
    seed: int = 0
    paper_scale: bool = False


@dataclass
class QuadratureConfig:
    """振荡积分配置"""
    taylor_threshold: float = 4.0
    taylor_degree: int = 40
    prune_tolerance: float = 1e-15


@dataclass
class ReferenceSettings:
    """参考解配置"""
    substeps_per_fast_period: int = 200
    self_convergence_tol: float = 1e-10
    max_refinements: int = 4
    max_steps: int = 4_000_000
    nonlinear_route: str = "auto"
    strobe_tolerance: float = 1e-13


@dataclass
class PicDefaults:
    """PIC 默认参数"""
    n1: int = 64
    n2: int = 4
    particles_per_cell: int = 50
    spline_order: int = 2
    dt: float = 0.01
    t_final: float = 30.0
    fit_window: Tuple[float, float] = (5.0, 30.0)
    chunk_size: int = 65536


@dataclass
class Config:
    """总配置类"""
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    reference: ReferenceSettings = field(default_factory=ReferenceSettings)
    pic: PicDefaults = field(default_factory=PicDefaults)

    def to_dict(self):
        """转换为字典"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        """从字典创建配置"""
        runtime_data = data.get("runtime", {})
        quadrature_data = data.get("quadrature", {})
        reference_data = data.get("reference", {})
        pic_data = data.get("pic", {})

        runtime_config = RuntimeConfig(
            threads=runtime_data.get("threads", 1),
            output_dir=runtime_data.get("output_dir", "results"),
            log_dir=runtime_data.get("log_dir", "logs"),
            data_dir=runtime_data.get("data_dir", "data"),
            seed=runtime_data.get("seed", 0),
            paper_scale=runtime_data.get("paper_scale", False)
        )

        quadrature_config = QuadratureConfig(
            taylor_threshold=quadrature_data.get("taylor_threshold", 4.0),
            taylor_degree=quadrature_data.get("taylor_degree", 40),
            prune_tolerance=quadrature_data.get("prune_tolerance", 1e-15)
        )

        reference_config = ReferenceSettings(
            substeps_per_fast_period=reference_data.get("substeps_per_fast_period", 200),
            self_convergence_tol=reference_data.get("self_convergence_tol", 1e-10),
            max_refinements=reference_data.get("max_refinements", 4),
            max_steps=reference_data.get("max_steps", 4_000_000),
            nonlinear_route=reference_data.get("nonlinear_route", "auto"),
            strobe_tolerance=reference_data.get("strobe_tolerance", 1e-13)
        )

        pic_config = PicDefaults(
            n1=pic_data.get("n1", 64),
            n2=pic_data.get("n2", 4),
            particles_per_cell=pic_data.get("particles_per_cell", 50),
            spline_order=pic_data.get("spline_order", 2),
            dt=pic_data.get("dt", 0.01),
            t_final=pic_data.get("t_final", 30.0),
            fit_window=tuple(pic_data.get("fit_window", (5.0, 30.0))),
            chunk_size=pic_data.get("chunk_size", 65536)
        )

        return cls(
            runtime=runtime_config,
            quadrature=quadrature_config,
            reference=reference_config,
            pic=pic_config
        )

    def reference_config(self):
        """转换为参考解服务使用的配置"""
        from services.reference_oracle import ReferenceConfig
        return ReferenceConfig(
            substeps_per_fast_period=self.reference.substeps_per_fast_period,
            self_convergence_tol=self.reference.self_convergence_tol,
            max_refinements=self.reference.max_refinements,
            max_steps=self.reference.max_steps,
            nonlinear_route=self.reference.nonlinear_route,
            strobe_tolerance=self.reference.strobe_tolerance
        )

    def apply_quadrature(self):
        """将振荡积分选项写入积分服务"""
        from services.osc_quadrature import configure_quadrature
        return configure_quadrature(
            taylor_threshold=self.quadrature.taylor_threshold,
            taylor_degree=self.quadrature.taylor_degree,
            prune_tolerance=self.quadrature.prune_tolerance
        )


class EnvSettings(BaseSettings):
    """环境变量覆盖（UAPIC_THREADS、UAPIC_LOG_DIR、UAPIC_OUTPUT_DIR）"""
    model_config = SettingsConfigDict(env_prefix="UAPIC_")

    threads: Optional[int] = None
    log_dir: Optional[str] = None
    output_dir: Optional[str] = None

    def apply(self, config: Config) -> Config:
        if self.threads is not None:
            config.runtime.threads = self.threads
        if self.log_dir is not None:
            config.runtime.log_dir = self.log_dir
        if self.output_dir is not None:
            config.runtime.output_dir = self.output_dir
        return config


class ConfigManager:
    """配置管理器 - 使用数据库存储"""

    def __init__(self):
        self.config = Config()
        self.load()

    def load(self) -> Config:
        """从数据库加载配置"""
        try:
            from services.database import get_database
            db = get_database()

            config_json = db.get_config("app_config")
            if config_json:
                try:
                    data = json.loads(config_json)
                    self.config = EnvSettings().apply(Config.from_dict(data))
                    logger.info("从数据库加载配置成功")
                    return self.config
                except (json.JSONDecodeError, TypeError, AttributeError):
                    logger.warning("配置数据格式错误，使用默认配置")
            else:
                logger.info("数据库中未找到配置，使用默认配置")

            # 使用默认配置并保存到数据库
            self.config = Config()
            self.save()
            self.config = EnvSettings().apply(self.config)
            return self.config

        except Exception as e:
            logger.error(f"加载配置失败，使用默认配置: {e}")
            self.config = EnvSettings().apply(Config())
            return self.config

    def save(self) -> bool:
        """保存配置到数据库"""
        try:
            from services.database import get_database
            db = get_database()
            db.set_config("app_config", self.config.to_dict())
            logger.info("配置已保存到数据库")
            return True
        except Exception as e:
            logger.error(f"保存配置失败: {e}")
            return False

    def update(self, section: str, **kwargs):
        """更新某个配置分节的字段"""
        target = getattr(self.config, section, None)
        if target is None:
            raise AttributeError(f"未知配置分节: {section}")
        for key, value in kwargs.items():
            if hasattr(target, key):
                setattr(target, key, value)
            else:
                logger.warning(f"忽略未知配置项: {section}.{key}")
        self.save()

    def get(self) -> Config:
        """获取当前配置"""
        return self.config


# 全局配置实例
_config_manager: Optional[ConfigManager] = None


def get_config_manager() -> ConfigManager:
    """获取配置管理器单例"""
    global _config_manager
    if _config_manager is None:
        _config_manager = ConfigManager()
    return _config_manager


def get_config() -> Config:
    """获取当前配置"""
    return get_config_manager().get()


def reset_config_manager():
    """丢弃配置单例（切换数据库后重新加载）"""
    global _config_manager
    _config_manager = None
