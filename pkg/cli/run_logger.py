"""
运行日志工具
每次实验运行拥有独立的日志文件 logs/run_<run_id>.log
"""
from pathlib import Path
from loguru import logger

_run_logs_dir = Path(__file__).parent.parent / "logs"

# 已添加的运行handler（存储handler_id）
_added_run_handlers = {}  # {run_id: handler_id}


def set_run_log_dir(log_dir) -> Path:
    """切换运行日志目录（配置中的 runtime.log_dir）"""
    global _run_logs_dir
    _run_logs_dir = Path(log_dir)
    return _run_logs_dir


def get_run_log_file(run_id: str) -> Path:
    """获取运行的日志文件路径"""
    return _run_logs_dir / f"run_{run_id}.log"


def get_run_logger(run_id: str):
    """获取绑定了 run_id 的logger实例"""
    return logger.bind(run_id=run_id)


def add_run_log_handler(run_id: str):
    """为运行添加日志handler（只添加一次）"""
    if run_id in _added_run_handlers:
        logger.debug(f"运行日志handler已存在: {run_id}")
        return

    _run_logs_dir.mkdir(parents=True, exist_ok=True)
    run_log_file = get_run_log_file(run_id)

    handler_id = logger.add(
        run_log_file,
        rotation="10 MB",
        retention="7 days",
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}",
        filter=lambda record: record["extra"].get("run_id") == run_id,
        enqueue=True
    )

    _added_run_handlers[run_id] = handler_id
    logger.debug(f"添加运行日志handler: {run_id}, 文件: {run_log_file}, handler_id: {handler_id}")


def remove_run_log_handler(run_id: str):
    """移除运行的日志handler并刷新文件"""
    if run_id not in _added_run_handlers:
        logger.debug(f"运行日志handler不存在: {run_id}")
        return

    handler_id = _added_run_handlers[run_id]
    try:
        # remove() 会等待队列写完并关闭文件
        logger.remove(handler_id)
        logger.debug(f"已移除运行日志handler: {run_id}, handler_id: {handler_id}")
    except Exception as e:
        logger.warning(f"移除运行日志handler时出错: {e}")
    finally:
        _added_run_handlers.pop(run_id, None)
