"""
主程序入口
一致精度积分器与 PIC 实验的命令行
"""
import argparse
import json
import sys
from pathlib import Path
from loguru import logger

# 确保数据目录存在
project_dir = Path(__file__).parent
data_dir = project_dir / "data"
logs_dir = project_dir / "logs"

EXPERIMENT_COMMANDS = {
    "converge": "收敛阶扫描（含 ε→0 退化检验）",
    "energy": "能量审计",
    "spectrum": "轨迹频谱",
    "confine": "约束性研究",
    "landau": "朗道阻尼（PIC）",
    "oracle": "预言机自检",
}


def setup_logging(log_dir: Path = logs_dir, verbose: bool = False):
    """配置日志"""
    log_dir.mkdir(parents=True, exist_ok=True)
    logger.remove()
    logger.add(
        log_dir / "uapic.log",
        rotation="10 MB",
        retention="7 days",
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"
    )
    logger.add(sys.stderr, format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
               level="DEBUG" if verbose else "INFO")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uapic", description="一致精度积分器与 Vlasov–Poisson PIC 实验")
    parser.add_argument("-v", "--verbose", action="store_true", help="在终端输出调试日志")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, help_text in EXPERIMENT_COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="实验配置 JSON（缺省使用内置预设）")
        sub.add_argument("--out", help="CSV 输出目录")
        sub.add_argument("--seed", type=int, help="PIC 采样随机种子")
        sub.add_argument("--threads", type=int, help="并行线程数")
        sub.add_argument("--paper-scale", action="store_true", help="使用完整规模参数")

    runs = subparsers.add_parser("runs", help="列出已登记的运行")
    runs.add_argument("--status", choices=["pending", "running", "passed", "failed", "error"], help="按状态过滤")
    return parser


def main(argv=None) -> int:
    """主函数"""
    args = build_parser().parse_args(argv)

    from config import get_config
    config = get_config()
    setup_logging(project_dir / config.runtime.log_dir, args.verbose)
    data_dir.mkdir(exist_ok=True)

    if args.command == "runs":
        from cli.commands import summarize_runs
        print(json.dumps(summarize_runs(args.status), ensure_ascii=False, indent=2))
        return 0

    from cli.commands import run_command
    logger.info(f"启动子命令: {args.command}")
    try:
        return run_command(args.command, config_path=args.config, out=args.out, seed=args.seed,
                           threads=args.threads, paper_scale=args.paper_scale, app_config=config)
    except KeyboardInterrupt:
        logger.info("已中断")
        return 130


if __name__ == "__main__":
    sys.exit(main())
