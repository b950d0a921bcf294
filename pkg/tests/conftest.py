"""
测试公共夹具
"""
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from cli.run_logger import set_run_log_dir  # noqa: E402
from config import reset_config_manager  # noqa: E402
from services.database import use_database  # noqa: E402
from services.osc_quadrature import PeriodicProfile, QuadratureOptions, configure_quadrature  # noqa: E402
from services.particle_model import build_A  # noqa: E402
from services.run_manager import reset_run_manager  # noqa: E402
from services.sav_schemes import PotentialField  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path):
    """每个测试使用独立的数据库、配置与日志目录"""
    db = use_database(tmp_path / "data" / "uapic.db")
    reset_config_manager()
    reset_run_manager()
    set_run_log_dir(tmp_path / "logs")
    yield db
    defaults = QuadratureOptions()
    configure_quadrature(defaults.taylor_threshold, defaults.taylor_degree, defaults.prune_tolerance)
    reset_config_manager()
    reset_run_manager()


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "results"
    path.mkdir()
    return path


@pytest.fixture
def cosine():
    return PeriodicProfile.cosine()


@pytest.fixture
def one_plus_cosine():
    return PeriodicProfile.one_plus_cosine()


@pytest.fixture
def particle_system(cosine):
    """θ = cos，B = 1，ε = 0.05 的归一化带电粒子系统"""
    return build_A(cosine, 1.0, normalized=True, epsilon=0.05)


@pytest.fixture
def oscillating_potential():
    return PotentialField.oscillating()


@pytest.fixture
def confining_potential():
    return PotentialField.confining_oscillating()


@pytest.fixture
def state4():
    return np.array([1.0, 0.5, -0.5, 1.0])
