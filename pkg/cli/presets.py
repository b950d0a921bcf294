"""
内置实验预设
每个子命令一组实验，默认是桌面规模；--paper-scale 切换到完整规模
"""
import math
from typing import Dict, List

from cli.models import ExperimentConfig, ExperimentKind
from services.errors import ConfigurationError

# 子命令 -> 允许的实验类型
COMMAND_KINDS: Dict[str, tuple] = {
    "converge": (ExperimentKind.CONVERGE, ExperimentKind.DEGENERACY),
    "energy": (ExperimentKind.ENERGY,),
    "spectrum": (ExperimentKind.SPECTRUM,),
    "confine": (ExperimentKind.CONFINE,),
    "landau": (ExperimentKind.LANDAU,),
    "oracle": (ExperimentKind.ORACLE,),
}

CONFINE_STATE = [0.1, 0.0, 1.0, 0.5]


def _powers_of_two(first: int, last: int) -> List[float]:
    return [2.0 ** -k for k in range(first, last + 1)]


def _eps_grid(paper_scale: bool) -> List[float]:
    """ε ∈ {1, …, 1e-6}；完整规模取半个数量级的间隔"""
    if paper_scale:
        return [10.0 ** (-k / 2) for k in range(0, 13)]
    return [10.0 ** -k for k in range(0, 7)]


def _between(metric: str, centre: float, half_width: float) -> dict:
    return {"metric": metric, "lower": centre - half_width, "upper": centre + half_width}


def converge_presets(paper_scale: bool) -> List[dict]:
    eps = _eps_grid(paper_scale)
    dts = _powers_of_two(4, 10)
    return [
        {
            "id": "converge_explicit1",
            "experiment": "converge", "scheme": "explicit1", "profile": "one_plus_cosine",
            "eps_list": eps, "dt_list": dts, "T": 1.0,
            "gates": [_between("uniform_slope", 1.0, 0.2)],
        },
        {
            "id": "converge_midpoint",
            "experiment": "converge", "scheme": "midpoint_ua", "compare": ["midpoint_naive"],
            "profile": "cosine", "eps_list": eps, "dt_list": dts, "T": 1.0,
            "gates": [_between("uniform_slope", 2.0, 0.2),
                      {"metric": "midpoint_naive.uniform_slope", "upper": 1.3}],
        },
        {
            "id": "converge_explicit4",
            "experiment": "converge", "scheme": "explicit4", "system": "scalar",
            "profile": "two_plus_half_cos_squared", "initial_state": [1.0],
            "eps_list": eps, "dt_list": _powers_of_two(2, 6), "T": 1.0,
            "gates": [_between("uniform_slope", 4.0, 0.4)],
        },
        {
            "id": "converge_nonlinear",
            "experiment": "converge", "scheme": "nl_order2", "profile": "cosine", "potential": "oscillating",
            "eps_list": eps, "dt_list": dts, "T": 1.0,
            "gates": [_between("uniform_slope", 2.0, 0.2)],
        },
        {
            "id": "converge_sav",
            "experiment": "converge", "scheme": "sav_ua_choice2", "compare": ["sav_ua_choice1"],
            "profile": "cosine", "potential": "oscillating",
            "eps_list": eps, "dt_list": dts, "T": 1.0,
            "gates": [_between("uniform_slope", 2.0, 0.25),
                      _between("sav_ua_choice1.uniform_slope", 2.0, 0.25)],
        },
        {
            "id": "degeneracy_midpoint",
            "experiment": "degeneracy", "scheme": "midpoint_ua", "compare": ["averaged_midpoint"],
            "profile": "cosine", "eps_list": [1e-2, 1e-3, 1e-4], "dt_list": [0.01], "T": 1.0,
            "gates": [{"metric": "gap_slope", "lower": 0.9}],
        },
    ]


def energy_presets(paper_scale: bool) -> List[dict]:
    return [
        {
            "id": "energy_sav_averaged",
            "experiment": "energy", "scheme": "sav_averaged_taylor", "compare": ["sav_averaged_extrapolation"],
            "profile": "cosine", "potential": "confining_oscillating",
            "eps_list": [1e-3], "dt_list": [0.1], "T": 100.0,
            "gates": [{"metric": "hbar_drift", "upper": 1e-11}],
        },
        {
            "id": "energy_averaged_midpoint",
            "experiment": "energy", "scheme": "averaged_midpoint", "compare": ["averaged_exp_taylor"],
            "profile": "one_plus_cosine", "eps_list": [1e-3], "dt_list": [0.1], "T": 1000.0,
            "gates": [{"metric": "h1_drift", "upper": 1e-12},
                      {"metric": "h2_drift", "upper": 1e-12},
                      {"metric": "averaged_exp_taylor.hbar_drift", "lower": 1e-6}],
        },
        {
            # c²⟨θ²⟩ = 1，⟨A⟩ 反对称
            "id": "energy_norm_skew",
            "experiment": "energy", "scheme": "averaged_midpoint", "profile": "cosine", "B": math.sqrt(2.0),
            "eps_list": [1e-3], "dt_list": [0.1], "T": 1000.0,
            "gates": [{"metric": "norm_drift", "upper": 1e-13}],
        },
    ]


def spectrum_presets(paper_scale: bool) -> List[dict]:
    common = {"experiment": "spectrum", "scheme": "explicit1", "compare": ["averaged_midpoint"],
              "eps_list": [0.1], "dt_list": [0.001], "T": 100.0,
              "gates": [{"metric": "peak_offset_bins", "upper": 1.0}]}
    return [
        {"id": "spectrum_two_frequencies", "profile": "one_plus_cosine", "B": 1.0, **common},
        {"id": "spectrum_cosine_family", "profile": "cosine", "B_list": [0.5, 1.0, 5.0], **common},
    ]


def confine_presets(paper_scale: bool) -> List[dict]:
    return [
        {
            "id": "confine_sav",
            "experiment": "confine", "scheme": "sav_ua_choice2", "compare": ["sav_averaged_taylor"],
            "profile": "cosine", "potential": "confining_oscillating", "initial_state": CONFINE_STATE,
            "B_list": [0.5, 1.0, 5.0], "eps_list": [0.1, 0.001], "dt_list": [0.1], "T": 100.0,
            "gates": [{"metric": "monotone_in_B", "lower": 1.0}],
        },
    ]


def landau_presets(paper_scale: bool) -> List[dict]:
    cells = 128 if paper_scale else 64
    ppc = 100 if paper_scale else 50
    line = {"n1": cells, "n2": 4, "particles_per_cell": ppc, "t_final": 30.0}
    square = {"n1": cells, "n2": cells, "particles_per_cell": ppc, "t_final": 30.0}
    presets = [
        {
            "id": "landau_1d_k05",
            "experiment": "landau", "scheme": "pic", "B_list": [0.0], "eps_list": [1e-3],
            "pic": {**line, "k1": 0.5, "xi1": 0.05},
            "gates": [{"metric": "rate_gap", "upper": 0.15}],
        },
        {
            "id": "landau_1d_k04",
            "experiment": "landau", "scheme": "pic", "B_list": [0.0], "eps_list": [1e-3],
            "pic": {**line, "k1": 0.4, "xi1": 0.05},
            "gates": [{"metric": "rate_gap", "upper": 0.15}],
        },
        {
            "id": "landau_2d_k05",
            "experiment": "landau", "scheme": "pic", "B_list": [0.0], "eps_list": [1e-3],
            "pic": {**square, "k1": 0.5, "k2": 0.5, "xi1": 0.05, "xi2": 0.05},
            "gates": [_between("rate", -0.15, 0.03)],
        },
        {
            "id": "landau_disintegration",
            "experiment": "landau", "scheme": "pic", "B_list": [0.0, 0.01, 0.05, 0.1, 0.15], "eps_list": [1e-3],
            "pic": {**line, "k1": 0.3, "xi1": 0.05},
            "gates": [
                {"metric": "damping_B0.01", "lower": 1.0},
                {"metric": "damping_B0.05", "lower": 1.0},
                {"metric": "damping_B0.1", "upper": 0.0},
                {"metric": "damping_B0.15", "upper": 0.0},
            ],
        },
    ]
    if paper_scale:
        presets.append({
            "id": "landau_2d_magnetized",
            "experiment": "landau", "scheme": "pic", "B_list": [0.0, 0.05, 0.15], "eps_list": [1e-3],
            "pic": {**square, "k1": 0.3, "k2": 0.3, "xi1": 0.05, "xi2": 0.05},
            "gates": [{"metric": "damping_B0.05", "lower": 1.0}, {"metric": "damping_B0.15", "upper": 0.0}],
        })
    return presets


def oracle_presets(paper_scale: bool) -> List[dict]:
    return [
        {
            "id": "oracle_suite",
            "experiment": "oracle", "scheme": "midpoint_ua", "profile": "cosine",
            "eps_list": [1.0, 0.1, 1e-2, 1e-3, 1e-4], "dt_list": [0.1, 0.05, 0.01],
            "k_list": [0.3, 0.4, 0.5],
            "gates": [
                {"metric": "quadrature_max_rel_err", "upper": 1e-8},
                {"metric": "lemma_bound_ratio", "upper": 1.0},
                {"metric": "dispersion_max_residual", "upper": 1e-8},
                _between("gamma_k0.5", -0.1533, 1e-3),
            ],
        },
    ]


PRESETS = {
    "converge": converge_presets,
    "energy": energy_presets,
    "spectrum": spectrum_presets,
    "confine": confine_presets,
    "landau": landau_presets,
    "oracle": oracle_presets,
}


def get_presets(command: str, paper_scale: bool = False) -> List[ExperimentConfig]:
    """返回子命令的内置实验列表"""
    if command not in PRESETS:
        raise ConfigurationError(f"未知子命令: {command}")
    return [ExperimentConfig(**preset) for preset in PRESETS[command](paper_scale)]


def check_command(command: str, experiments: List[ExperimentConfig]):
    """--config 中的实验类型必须属于该子命令"""
    allowed = COMMAND_KINDS[command]
    for cfg in experiments:
        if cfg.experiment not in allowed:
            raise ConfigurationError(
                f"实验 {cfg.id} 的类型 {cfg.experiment.value} 不属于子命令 {command}"
                f"（允许: {[k.value for k in allowed]}）"
            )

