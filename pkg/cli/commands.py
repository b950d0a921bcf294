"""
命令行子命令实现
加载实验列表（--config 或内置预设），逐个运行并根据门限返回退出码
"""
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from cli.models import ExperimentConfig, ExperimentFile, RunStatus
from cli.presets import check_command, get_presets
from cli.run_logger import set_run_log_dir
from config import PROJECT_DIR, Config, get_config
from services.errors import ConfigurationError, UapicError
from services.run_manager import get_run_manager

EXIT_OK = 0
EXIT_GATES_FAILED = 1
EXIT_CONFIG_ERROR = 2


def _validation_message(error: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in error.errors())


def parse_experiments(data) -> List[ExperimentConfig]:
    """单个实验对象或 {"experiments": [...]}"""
    try:
        if isinstance(data, dict) and "experiments" in data:
            return ExperimentFile(**data).experiments
        if isinstance(data, list):
            return ExperimentFile(experiments=data).experiments
        return [ExperimentConfig(**data)]
    except ValidationError as e:
        raise ConfigurationError(f"实验配置无效: {_validation_message(e)}") from e
    except TypeError as e:
        raise ConfigurationError(f"实验配置格式错误: {e}") from e


def load_experiments(path) -> List[ExperimentConfig]:
    """读取 --config 文件"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"配置文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"配置文件不是合法 JSON: {path}: {e}") from e
    experiments = parse_experiments(data)
    logger.info(f"从 {path} 读取了 {len(experiments)} 个实验")
    return experiments


def apply_seed(experiments: List[ExperimentConfig], seed: Optional[int]) -> List[ExperimentConfig]:
    """--seed 覆盖 PIC 采样种子"""
    if seed is None:
        return experiments
    return [
        cfg.model_copy(update={"pic": cfg.pic.model_copy(update={"seed": seed})}) if cfg.pic else cfg
        for cfg in experiments
    ]


def run_command(command: str, config_path: Optional[str] = None, out: Optional[str] = None,
                seed: Optional[int] = None, threads: Optional[int] = None, paper_scale: bool = False,
                app_config: Optional[Config] = None) -> int:
    """运行一个子命令；所有门限通过返回 0"""
    app_config = app_config or get_config()
    try:
        if config_path:
            experiments = load_experiments(config_path)
            check_command(command, experiments)
        else:
            experiments = get_presets(command, paper_scale or app_config.runtime.paper_scale)
    except ConfigurationError as e:
        logger.error(f"配置错误: {e}")
        return EXIT_CONFIG_ERROR

    seed = seed if seed is not None else (app_config.runtime.seed or None)
    experiments = apply_seed(experiments, seed)
    out_root = Path(out or app_config.runtime.output_dir)
    threads = threads or app_config.runtime.threads
    set_run_log_dir(PROJECT_DIR / app_config.runtime.log_dir)
    app_config.apply_quadrature()

    logger.info(f"子命令 {command}: {len(experiments)} 个实验, 输出目录 {out_root}, 线程数 {threads}")
    manager = get_run_manager()
    all_passed = True
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for cfg in experiments:
            try:
                run, outcome = manager.execute(cfg, out_root, app_config=app_config, executor=executor)
            except UapicError as e:
                logger.error(f"实验 {cfg.id} 出错: {e}")
                all_passed = False
                continue
            if outcome is None:
                logger.error(f"实验 {cfg.id} 出错: {manager.get_run(run.run_id).error_message}")
                all_passed = False
                continue
            failed = [g.name for g in outcome.gates if not g.passed]
            if failed:
                logger.warning(f"实验 {cfg.id} 未通过的门限: {failed}")
                all_passed = False
            else:
                logger.info(f"实验 {cfg.id} 全部门限通过 ({len(outcome.gates)} 项)")
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    stats = manager.get_run_statistics()
    logger.info(f"运行统计: 通过 {stats.passed}, 未通过 {stats.failed}, 出错 {stats.error}")
    return EXIT_OK if all_passed else EXIT_GATES_FAILED


def summarize_runs(status: Optional[str] = None) -> List[dict]:
    """列出已登记的运行（runs 子命令）"""
    status = RunStatus(status).value if status else None
    return [info.model_dump(mode="json") for info in get_run_manager().list_runs(status)]
