"""
命令行入口
ingest / run / compare / sweep 四个子命令，退出码：0 成功，2 配置错误，3 数据错误，4 提供商错误
"""
from typing import List, Dict, Any, Optional, Sequence
from pathlib import Path
import argparse
import asyncio
import sys

# .env 文件已在 app.config 模块中自动加载
from app.config import RunConfig, build_run_config, load_run_config
from app.exceptions import ConfigError, FinMemError
from app.models.schemas import ReportFile, RiskMode
from app.services.backtest import BacktestResult, load_warehouse, report_file, run_from_config
from app.services.report_service import (
    SWEEP_TABLE_FILE,
    TRIALS_SUMMARY_FILE,
    comparison_table,
    load_report,
    save_table,
    save_trials_summary,
    trials_summary,
    write_run_outputs,
)
from app.utils.async_helper import TaskQueue
from app.utils.logger import log


# 覆盖参数：(配置键, 类型)；每个参数只对应一个配置键
OVERRIDE_FLAGS = [
    ("ticker", str),
    ("prices_path", str),
    ("documents_path", str),
    ("metadata_path", str),
    ("rulebook_path", str),
    ("output_dir", str),
    ("label", str),
    ("train_start", str),
    ("train_end", str),
    ("test_start", str),
    ("test_end", str),
    ("k_top", int),
    ("m_window", int),
    ("switch_window", int),
    ("risk", str),
    ("promotion_threshold", int),
    ("seed", int),
    ("provider", str),
    ("temperature", float),
    ("embedding_dimension", int),
    ("max_validation_retries", int),
    ("risk_free_daily", float),
    ("summarize_concurrency", int),
    ("trials", int),
]
BOOLEAN_FLAGS = ["annualize_sharpe", "causality_guard"]


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", type=Path, help="YAML 运行配置文件")
    group = parser.add_argument_group("配置覆盖")
    for key, kind in OVERRIDE_FLAGS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None)
    for key in BOOLEAN_FLAGS:
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=key,
            action=argparse.BooleanOptionalAction,
            default=None,
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finmem", description="FinMem 分层记忆交易 Agent 回测工具")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="加载数据并输出概况")
    _add_config_arguments(ingest)

    run = sub.add_parser("run", help="执行回测并写出报告")
    _add_config_arguments(run)
    run.add_argument("--print-config", action="store_true", help="输出解析后的配置 (YAML) 后退出")
    run.add_argument("--parallel", action="store_true", help="多次试验并发执行")

    compare = sub.add_parser("compare", help="对比多个报告文件")
    compare.add_argument("reports", nargs="+", type=Path)
    compare.add_argument("--output", "-o", type=Path, help="对比表写出路径")

    sweep = sub.add_parser("sweep", help="按 K 或风险偏好批量回测")
    _add_config_arguments(sweep)
    target = sweep.add_mutually_exclusive_group(required=True)
    target.add_argument("--k", nargs="+", type=int, help="工作记忆容量 K 的取值")
    target.add_argument("--risk-modes", nargs="+", choices=[m.value for m in RiskMode], help="风险偏好取值")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    keys = [key for key, _ in OVERRIDE_FLAGS] + BOOLEAN_FLAGS
    return {key: getattr(args, key, None) for key in keys}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, collect_overrides(args))


def _with_updates(config: RunConfig, **updates: Any) -> RunConfig:
    data = config.model_dump(mode="json")
    data.update(updates)
    return build_run_config(data)


# ========== 子命令 ==========

def cmd_ingest(config: RunConfig) -> int:
    """加载数据仓库并输出各类文档数量与日期覆盖范围"""
    warehouse = load_warehouse(config)
    summary = warehouse.summary(config.ticker)
    print(summary.model_dump_json(indent=2))
    return 0


async def run_single(config: RunConfig) -> BacktestResult:
    result, agent = await run_from_config(config)
    await write_run_outputs(config.output_dir, config, result, agent.memory)
    return result


async def cmd_run(config: RunConfig, parallel: bool = False) -> int:
    """
    执行回测；trials > 1 时依次使用 seed, seed+1, ... 并写出均值汇总
    """
    if config.trials == 1:
        result = await run_single(config)
        print(comparison_table([
            report_file(config.label, result.report, config),
            report_file("B&H", result.baseline_report, config),
        ]))
        return 0

    base_seed = config.seed
    trial_configs = [
        _with_updates(
            config,
            seed=None if base_seed is None else base_seed + i,
            output_dir=str(Path(config.output_dir) / f"trial_{i}"),
            trials=1,
        )
        for i in range(config.trials)
    ]
    if parallel:
        queue = TaskQueue(max_concurrent=len(trial_configs))
        for trial in trial_configs:
            await queue.add_task(run_single(trial))
        results = await queue.wait_all()
        for outcome in results:
            if isinstance(outcome, BaseException):
                raise outcome
    else:
        results = [await run_single(trial) for trial in trial_configs]

    seeds = [c.seed for c in trial_configs]
    summary = trials_summary([r.report for r in results], seeds)
    summary["baseline_mean"] = trials_summary([r.baseline_report for r in results], seeds)["mean"]
    path = await save_trials_summary(Path(config.output_dir) / TRIALS_SUMMARY_FILE, summary)
    log.info(f"{config.trials} 次试验汇总已写入 {path}")
    print(comparison_table([
        report_file(f"{config.label} (trial {c.seed})", r.report, c)
        for c, r in zip(trial_configs, results)
    ]))
    return 0


async def cmd_compare(paths: Sequence[Path], output: Optional[Path] = None) -> int:
    """读取报告文件并输出对比表"""
    if len(paths) < 2:
        raise ConfigError("compare 至少需要两个报告文件")
    reports: List[ReportFile] = [load_report(p) for p in paths]
    table = comparison_table(reports)
    print(table)
    if output is not None:
        await save_table(output, table)
    return 0


async def cmd_sweep(config: RunConfig, k_values: Optional[List[int]], risk_modes: Optional[List[str]]) -> int:
    """对每个 K（或风险偏好）运行一次回测并写出对比表"""
    if k_values:
        variants = [
            (f"K={k}", {"k_top": k, "output_dir": str(Path(config.output_dir) / f"k_{k}")})
            for k in k_values
        ]
    else:
        variants = [
            (mode, {"risk": mode, "output_dir": str(Path(config.output_dir) / mode)})
            for mode in risk_modes
        ]

    reports: List[ReportFile] = []
    baseline = None
    for label, updates in variants:
        variant = _with_updates(config, label=label, trials=1, **updates)
        result = await run_single(variant)
        reports.append(report_file(label, result.report, variant))
        baseline = report_file("B&H", result.baseline_report, variant)
    reports.append(baseline)

    table = comparison_table(reports)
    await save_table(Path(config.output_dir) / SWEEP_TABLE_FILE, table)
    print(table)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            return asyncio.run(cmd_compare(args.reports, args.output))

        config = resolve_config(args)
        if args.command == "ingest":
            return cmd_ingest(config)
        if args.command == "run":
            if args.print_config:
                print(config.to_yaml(), end="")
                return 0
            return asyncio.run(cmd_run(config, parallel=args.parallel))
        return asyncio.run(cmd_sweep(config, args.k, args.risk_modes))
    except FinMemError as e:
        log.error(f"{args.command} 失败: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
