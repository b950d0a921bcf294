"""
SQLite数据库服务
实验运行登记：运行记录、门限判定与配置
"""
import sqlite3
import json
from pathlib import Path
from typing import Optional, List, Dict, Any
from contextlib import contextmanager
from loguru import logger
from datetime import datetime

RUN_COLUMNS = (
    "run_id", "experiment", "scheme", "config_json", "status", "output_dir",
    "created_at", "updated_at", "error_message",
)


class Database:
    """SQLite数据库管理类"""

    def __init__(self, db_path: str = None):
        if db_path is None:
            # 默认使用项目目录下的 data/uapic.db
            self.db_path = Path(__file__).parent.parent / "data" / "uapic.db"
        else:
            self.db_path = Path(db_path)
        self._ensure_db_dir()
        self._init_database()

    def _ensure_db_dir(self):
        """确保数据库目录存在"""
        self.db_path.parent.mkdir(parents=True, exist_ok=True)

    @contextmanager
    def get_connection(self):
        """获取数据库连接的上下文管理器"""
        conn = None
        try:
            conn = sqlite3.connect(self.db_path)
            conn.row_factory = sqlite3.Row
            yield conn
            conn.commit()
        except Exception as e:
            if conn:
                conn.rollback()
            logger.error(f"数据库操作失败: {e}")
            raise
        finally:
            if conn:
                conn.close()

    def _init_database(self):
        """初始化数据库表结构"""
        with self.get_connection() as conn:
            cursor = conn.cursor()

            # 创建运行表
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    experiment TEXT NOT NULL,
                    scheme TEXT NOT NULL,
                    config_json TEXT NOT NULL,
                    status TEXT NOT NULL,
                    output_dir TEXT NOT NULL,
                    created_at TEXT NOT NULL,
                    updated_at TEXT NOT NULL,
                    error_message TEXT
                )
            """)

            # 创建门限表
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS gates (
                    run_id TEXT NOT NULL,
                    name TEXT NOT NULL,
                    value REAL,
                    residual REAL,
                    lower REAL,
                    upper REAL,
                    passed INTEGER NOT NULL,
                    PRIMARY KEY (run_id, name)
                )
            """)

            # 创建配置表
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS config (
                    key TEXT PRIMARY KEY,
                    value TEXT NOT NULL,
                    updated_at TEXT NOT NULL
                )
            """)

            # 创建索引
            cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_status ON runs(status)")
            cursor.execute("CREATE INDEX IF NOT EXISTS idx_runs_created_at ON runs(created_at)")

            conn.commit()
            logger.info("数据库初始化完成")

    # ========== 运行表操作 ==========

    def get_all_runs(self, status_filter: Optional[str] = None,
                     experiment: Optional[str] = None) -> List[Dict[str, Any]]:
        """获取所有运行记录"""
        clauses, params = [], []
        if status_filter and status_filter != "all":
            clauses.append("status = ?")
            params.append(status_filter)
        if experiment:
            clauses.append("experiment = ?")
            params.append(experiment)
        where = f"WHERE {' AND '.join(clauses)}" if clauses else ""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute(f"SELECT * FROM runs {where} ORDER BY created_at DESC", params)
            return [dict(row) for row in cursor.fetchall()]

    def get_run(self, run_id: str) -> Optional[Dict[str, Any]]:
        """获取单个运行记录"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
            row = cursor.fetchone()
            return dict(row) if row else None

    def create_run(self, run_data: Dict[str, Any]) -> bool:
        """创建运行记录"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            try:
                cursor.execute(f"""
                    INSERT INTO runs ({", ".join(RUN_COLUMNS)})
                    VALUES ({", ".join("?" for _ in RUN_COLUMNS)})
                """, tuple(run_data.get(column) for column in RUN_COLUMNS))
                return True
            except sqlite3.IntegrityError:
                logger.error(f"运行 {run_data['run_id']} 已存在")
                return False

    def update_run(self, run_id: str, update_data: Dict[str, Any]) -> bool:
        """更新运行记录"""
        if not update_data:
            return False
        unknown = set(update_data) - set(RUN_COLUMNS)
        if unknown:
            raise ValueError(f"未知字段: {sorted(unknown)}")

        with self.get_connection() as conn:
            cursor = conn.cursor()
            set_clause = ", ".join([f"{k} = ?" for k in update_data.keys()])
            values = list(update_data.values()) + [run_id]
            cursor.execute(f"UPDATE runs SET {set_clause} WHERE run_id = ?", values)
            return cursor.rowcount > 0

    def delete_run(self, run_id: str) -> bool:
        """删除运行记录及其门限"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("DELETE FROM gates WHERE run_id = ?", (run_id,))
            cursor.execute("DELETE FROM runs WHERE run_id = ?", (run_id,))
            return cursor.rowcount > 0

    def delete_runs_by_status(self, status: str) -> int:
        """根据状态删除运行记录"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("DELETE FROM gates WHERE run_id IN (SELECT run_id FROM runs WHERE status = ?)",
                           (status,))
            cursor.execute("DELETE FROM runs WHERE status = ?", (status,))
            return cursor.rowcount

    def get_run_statistics(self) -> Dict[str, int]:
        """获取运行统计"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                SELECT
                    COUNT(*) as total,
                    SUM(CASE WHEN status = 'pending' THEN 1 ELSE 0 END) as pending,
                    SUM(CASE WHEN status = 'running' THEN 1 ELSE 0 END) as running,
                    SUM(CASE WHEN status = 'passed' THEN 1 ELSE 0 END) as passed,
                    SUM(CASE WHEN status = 'failed' THEN 1 ELSE 0 END) as failed,
                    SUM(CASE WHEN status = 'error' THEN 1 ELSE 0 END) as error
                FROM runs
            """)
            row = cursor.fetchone()
            return {key: (value or 0) for key, value in dict(row).items()}

    # ========== 门限表操作 ==========

    def record_gates(self, run_id: str, gates: List[Dict[str, Any]]) -> int:
        """写入（覆盖）某次运行的门限判定"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("DELETE FROM gates WHERE run_id = ?", (run_id,))
            cursor.executemany("""
                INSERT INTO gates (run_id, name, value, residual, lower, upper, passed)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            """, [
                (run_id, g["name"], g.get("value"), g.get("residual"), g.get("lower"), g.get("upper"),
                 1 if g["passed"] else 0)
                for g in gates
            ])
            return len(gates)

    def get_gates(self, run_id: str) -> List[Dict[str, Any]]:
        """获取某次运行的门限判定"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("SELECT * FROM gates WHERE run_id = ? ORDER BY name", (run_id,))
            rows = [dict(row) for row in cursor.fetchall()]
            for row in rows:
                row["passed"] = bool(row["passed"])
            return rows

    # ========== 配置表操作 ==========

    def get_config(self, key: str, default: Any = None) -> Optional[str]:
        """获取配置值"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("SELECT value FROM config WHERE key = ?", (key,))
            row = cursor.fetchone()
            return row["value"] if row else default

    def set_config(self, key: str, value: Any) -> bool:
        """设置配置值"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            now = datetime.now().isoformat()
            cursor.execute("""
                INSERT OR REPLACE INTO config (key, value, updated_at)
                VALUES (?, ?, ?)
            """, (key, json.dumps(value) if isinstance(value, (dict, list)) else str(value), now))
            return True

    def get_all_config(self) -> Dict[str, str]:
        """获取所有配置"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("SELECT key, value FROM config")
            rows = cursor.fetchall()
            return {row["key"]: row["value"] for row in rows}


# 全局数据库实例
_database: Optional[Database] = None


def get_database() -> Database:
    """获取数据库单例"""
    global _database
    if _database is None:
        _database = Database()
    return _database


def use_database(db_path) -> Database:
    """切换数据库文件（--data 目录或测试使用）"""
    global _database
    _database = Database(db_path)
    return _database
