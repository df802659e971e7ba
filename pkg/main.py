#!/usr/bin/env python3
"""
cpcv 命令行入口
用法: cpcv <stage> --config <file> [--seed N] [--workdir DIR]
"""

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

# 添加项目根目录到Python路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from analysis.nce_oracle import infonce_bound_sweep  # noqa: E402
from config import RuntimeEnv, Settings, default_lines, load_settings  # noqa: E402
from models.errors import ConfigError, CpcvError, DataError  # noqa: E402
from models.pipeline_models import Stage  # noqa: E402
from services.pipeline_service import PipelineService  # noqa: E402
from services.toy_corpus import generate_toy_corpus  # noqa: E402

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

EXTRA_COMMANDS = ["all", "show-config", "toy-corpus", "oracle", "receipts"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpcv", description="CPC 说话人验证工作台")
    parser.add_argument("command", choices=[s.value for s in Stage] + EXTRA_COMMANDS, help="要运行的阶段或命令")
    parser.add_argument("--config", default=None, help="key=value 配置文件")
    parser.add_argument("--seed", type=int, default=None, help="覆盖配置中的随机种子")
    parser.add_argument("--workdir", default=None, help="覆盖配置中的工作目录")
    parser.add_argument("--out", default=None, help="toy-corpus 的输出目录 / oracle 的 CSV 路径")
    return parser


def configure_logging(settings: Settings):
    logger.remove()
    logger.add(sys.stderr, level=settings.log_level.upper())
    log_dir = os.path.join(settings.workdir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    logger.add(os.path.join(log_dir, "cpcv.log"), level="DEBUG", rotation="10 MB", encoding="utf-8")


def run_command(args: argparse.Namespace) -> int:
    if args.command == "show-config":
        print("\n".join(default_lines()))
        return EXIT_OK

    if args.config is not None and not os.path.isfile(args.config):
        raise ConfigError(f"配置文件不存在: {args.config}")
    settings = load_settings(args.config, seed=args.seed, workdir=args.workdir)
    configure_logging(settings)
    workers = RuntimeEnv().workers

    if args.command == "toy-corpus":
        out = args.out or settings.corpus_root
        generate_toy_corpus(out, settings.toy_speakers, settings.toy_chapters, settings.toy_utterances,
                            settings.toy_seconds, settings.seed)
        return EXIT_OK

    if args.command == "oracle":
        out = args.out or os.path.join(settings.workdir, "results", "oracle.csv")
        report = infonce_bound_sweep(settings.oracle_classes, settings.oracle_batch, settings.oracle_channels,
                                     settings.oracle_trials, settings.seed, workers, settings.oracle_steps)
        directory = os.path.dirname(out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        report.to_csv(out, index=False, float_format="%.6f")
        violations = int((report["bound"] > report["I_true"] + 1e-9).sum())
        logger.info(f"[oracle] {len(report)} 个信道，下界超过真实互信息的次数: {violations}，已写入 {out}")
        return EXIT_OK

    service = PipelineService(settings, workers)
    try:
        if args.command == "receipts":
            for receipt in service.receipts.list_receipts():
                print(f"{receipt.stage}\t{receipt.finished_at}\t{receipt.wall_time:.2f}s\t{receipt.inputs_hash}")
        elif args.command == "all":
            service.run_all()
        else:
            service.run(Stage(args.command))
    finally:
        service.close()
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"❌ 配置错误: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"❌ 数据错误: {e}")
        return EXIT_DATA
    except CpcvError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
