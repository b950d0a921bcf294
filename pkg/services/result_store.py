"""
结果存储服务
以固定列顺序写出 CSV 表（pandas），每张表的表头在此登记
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from loguru import logger

# 表名 -> 列顺序
SCHEMAS: Dict[str, List[str]] = {
    "errors": ["scheme", "eps", "dt", "err", "err_x", "err_q", "slope"],
    "fits": ["scheme", "kind", "eps", "slope", "residual", "points"],
    "degeneracy": ["scheme", "eps", "dt", "gap"],
    "energy": ["scheme", "t", "Hbar", "H1", "H2", "norm"],
    "spectrum": ["trajectory", "B", "omega", "magnitude"],
    "peaks": ["trajectory", "B", "omega", "magnitude", "expected", "offset"],
    "traces": ["B", "eps", "t", "x1", "x2", "xbar1", "xbar2"],
    "extents": ["B", "eps", "max_extent", "max_extent_bar"],
    "landau_energy": ["B", "t", "energy", "momentum1", "momentum2"],
    "landau_rates": ["B", "k", "fitted_rate", "residual", "peaks", "oracle_rate", "gap", "classification",
                     "momentum_drift"],
    "snapshots": ["B", "t", "x1", "x2", "q1", "q2"],
    "dispersion": ["k", "omega_r", "gamma", "residual"],
    "quadrature": ["depth", "eps", "dt", "t_n", "closed_form", "quadrature", "rel_err"],
    "lemma": ["identity", "eps", "residual", "bound"],
    "lemma_fits": ["identity", "slope", "residual"],
    "gates": ["name", "value", "residual", "lower", "upper", "passed"],
}


def conform(name: str, rows) -> pd.DataFrame:
    """按登记的表头整理为 DataFrame，缺失列补 NaN、多余列报错"""
    if name not in SCHEMAS:
        raise KeyError(f"未登记的结果表: {name}")
    columns = SCHEMAS[name]
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    extra = [c for c in frame.columns if c not in columns]
    if extra:
        raise ValueError(f"结果表 {name} 含未登记的列: {extra}")
    return frame.reindex(columns=columns)


class ResultStore:
    """一次实验的输出目录"""

    def __init__(self, root, experiment_id: str):
        self.directory = Path(root) / experiment_id
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.directory / f"{name}.csv"

    def write(self, name: str, rows, float_format: Optional[str] = "%.17g") -> Path:
        frame = conform(name, rows)
        target = self.path(name)
        frame.to_csv(target, index=False, float_format=float_format)
        logger.debug(f"已写出结果表 {target} ({len(frame)} 行)")
        return target

    def write_all(self, tables: Dict[str, pd.DataFrame]) -> List[Path]:
        return [self.write(name, frame) for name, frame in tables.items()]

    def read(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path(name))

    def tables(self) -> Sequence[str]:
        return sorted(p.stem for p in self.directory.glob("*.csv"))
