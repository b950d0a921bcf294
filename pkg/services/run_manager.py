"""
运行管理服务
负责实验运行的生命周期管理、门限登记与结果落盘
"""
import json
import uuid
from concurrent.futures import Executor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

from loguru import logger

from cli.models import ExperimentConfig, GateResult, RunInfo, RunStatistics, RunStatus
from cli.run_logger import add_run_log_handler, get_run_logger, remove_run_log_handler
from config import Config, get_config
from services.database import get_database
from services.errors import UapicError
from services.experiments import ExperimentOutcome, run_experiment
from services.result_store import ResultStore


def _gate_from_row(row: dict) -> GateResult:
    """SQLite 把 NaN 存为 NULL，读回时还原"""
    data = {k: v for k, v in row.items() if k != "run_id"}
    if data.get("value") is None:
        data["value"] = float("nan")
    return GateResult(**data)


@dataclass
class RunData:
    """运行数据存储模型"""
    run_id: str
    experiment: str
    scheme: str
    config_json: str
    status: str
    output_dir: str
    created_at: str
    updated_at: str
    error_message: Optional[str] = None

    def to_model(self, gates: Optional[List[dict]] = None) -> RunInfo:
        """转换为结果模型"""
        return RunInfo(
            run_id=self.run_id,
            experiment=self.experiment,
            scheme=self.scheme,
            status=RunStatus(self.status),
            output_dir=self.output_dir,
            created_at=datetime.fromisoformat(self.created_at),
            updated_at=datetime.fromisoformat(self.updated_at),
            error_message=self.error_message,
            gates=[_gate_from_row(g) for g in (gates or [])]
        )

    @classmethod
    def from_dict(cls, data: dict) -> 'RunData':
        """从字典创建"""
        return cls(
            run_id=data["run_id"],
            experiment=data["experiment"],
            scheme=data["scheme"],
            config_json=data["config_json"],
            status=data["status"],
            output_dir=data["output_dir"],
            created_at=data["created_at"],
            updated_at=data["updated_at"],
            error_message=data.get("error_message")
        )


class RunManager:
    """运行管理器"""

    def __init__(self, db=None):
        self.db = db or get_database()
        self._load_cache()

    def _load_cache(self):
        """从数据库加载运行记录到缓存"""
        self.runs_cache = {}
        try:
            self.runs_cache = {
                run_data["run_id"]: RunData.from_dict(run_data)
                for run_data in self.db.get_all_runs()
            }
            logger.info(f"加载了 {len(self.runs_cache)} 条运行记录")
        except Exception as e:
            logger.error(f"加载运行记录失败: {e}")
            self.runs_cache = {}

    def create_run(self, cfg: ExperimentConfig, output_root) -> RunData:
        """登记新运行"""
        now = datetime.now().isoformat()
        run = RunData(
            run_id=f"{cfg.id}-{uuid.uuid4().hex[:8]}",
            experiment=cfg.experiment.value,
            scheme=cfg.scheme.value,
            config_json=cfg.model_dump_json(),
            status=RunStatus.PENDING.value,
            output_dir=str(Path(output_root) / cfg.output_name),
            created_at=now,
            updated_at=now
        )
        self.db.create_run(run.__dict__.copy())
        self.runs_cache[run.run_id] = run
        logger.info(f"创建运行: {run.run_id}")
        return run

    def get_run(self, run_id: str) -> Optional[RunData]:
        """获取运行"""
        return self.runs_cache.get(run_id)

    def update_run(self, run_id: str, status: Optional[RunStatus] = None,
                   error_message: Optional[str] = None) -> bool:
        """更新运行状态"""
        run = self.runs_cache.get(run_id)
        if not run:
            return False

        if status:
            run.status = status.value
        if error_message is not None:
            run.error_message = error_message
        run.updated_at = datetime.now().isoformat()

        update_data = {"updated_at": run.updated_at}
        if status:
            update_data["status"] = run.status
        if error_message is not None:
            update_data["error_message"] = run.error_message

        self.db.update_run(run_id, update_data)
        return True

    def record_gates(self, run_id: str, gates: List[GateResult]) -> int:
        """登记门限判定"""
        return self.db.record_gates(run_id, [g.model_dump() for g in gates])

    def execute(self, cfg: ExperimentConfig, output_root=None, app_config: Optional[Config] = None,
                executor: Optional[Executor] = None) -> Tuple[RunData, Optional[ExperimentOutcome]]:
        """
        运行一次实验：登记 → 运行 → 写 CSV → 登记门限 → 更新状态
        实验错误记为 error 状态并返回 None，不向外抛出
        """
        app_config = app_config or get_config()
        output_root = output_root or app_config.runtime.output_dir
        run = self.create_run(cfg, output_root)
        add_run_log_handler(run.run_id)
        log = get_run_logger(run.run_id)
        self.update_run(run.run_id, RunStatus.RUNNING)
        try:
            outcome = run_experiment(cfg, app_config=app_config, executor=executor, log=log)
            store = ResultStore(output_root, cfg.output_name)
            store.write_all(outcome.tables)
            store.write("gates", [g.model_dump() for g in outcome.gates])
            with open(store.directory / "config.json", "w", encoding="utf-8") as f:
                json.dump(json.loads(run.config_json), f, ensure_ascii=False, indent=2)
            self.record_gates(run.run_id, outcome.gates)
            status = RunStatus.PASSED if outcome.passed else RunStatus.FAILED
            self.update_run(run.run_id, status)
            log.info(f"运行 {run.run_id} 结束: {status.value}")
            return run, outcome
        except UapicError as e:
            log.error(f"运行 {run.run_id} 出错: {e}")
            self.update_run(run.run_id, RunStatus.ERROR, error_message=str(e))
            self.record_gates(run.run_id, [
                GateResult(name=rule.metric, value=float("nan"), lower=rule.lower, upper=rule.upper, passed=False)
                for rule in cfg.gates
            ])
            return run, None
        finally:
            remove_run_log_handler(run.run_id)

    def delete_run(self, run_id: str) -> bool:
        """删除运行记录"""
        if run_id in self.runs_cache:
            del self.runs_cache[run_id]
            self.db.delete_run(run_id)
            return True
        return False

    def delete_runs_by_status(self, status: str) -> int:
        """根据状态批量删除运行记录"""
        deleted_count = self.db.delete_runs_by_status(status)
        self._load_cache()
        return deleted_count

    def list_runs(self, status_filter: Optional[str] = None, experiment: Optional[str] = None) -> List[RunInfo]:
        """列出运行（含门限）"""
        return [
            RunData.from_dict(data).to_model(self.db.get_gates(data["run_id"]))
            for data in self.db.get_all_runs(status_filter, experiment)
        ]

    def get_run_statistics(self) -> RunStatistics:
        """获取运行统计"""
        return RunStatistics(**self.db.get_run_statistics())


# 全局运行管理器实例
_run_manager: Optional[RunManager] = None


def get_run_manager() -> RunManager:
    """获取运行管理器单例"""
    global _run_manager
    if _run_manager is None:
        _run_manager = RunManager()
    return _run_manager


def reset_run_manager():
    """丢弃运行管理器单例（切换数据库后使用）"""
    global _run_manager
    _run_manager = None
