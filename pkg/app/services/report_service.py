"""
报告服务
报告 / 账本 / 决策日志 / 记忆快照的写出，报告读取与对比表
"""
from typing import List, Dict, Optional, Sequence
from pathlib import Path
import hashlib
import json

import aiofiles
import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.config import RunConfig
from app.exceptions import DataError, SchemaMismatch
from app.models.schemas import LAYER_ORDER, PerformanceReport, ReportFile, TradeDecision, TradeLedger
from app.services.backtest import BacktestResult, equity_curve, report_file
from app.services.memory_service import LayeredMemory, snapshot_meta_path
from app.utils.logger import log


REPORT_FILE = "report.json"
BASELINE_REPORT_FILE = "baseline_report.json"
LEDGER_FILE = "ledger.csv"
BASELINE_LEDGER_FILE = "baseline_ledger.csv"
DECISIONS_FILE = "decisions.csv"
SNAPSHOT_FILE = "memory_snapshot.jsonl"
SNAPSHOT_META_FILE = snapshot_meta_path(Path(SNAPSHOT_FILE)).name
TRIALS_SUMMARY_FILE = "trials_summary.json"
SWEEP_TABLE_FILE = "sweep_table.txt"

# 对比表列：(指标字段, 列名, 越大越好)
METRIC_COLUMNS = [
    ("cumulative_return", "Cumulative Return (%)", True),
    ("sharpe", "Sharpe Ratio", True),
    ("daily_volatility", "Daily Volatility (%)", False),
    ("annualized_volatility", "Annualized Volatility (%)", False),
    ("max_drawdown", "Max Drawdown (%)", False),
]


async def _write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        async with aiofiles.open(path, "w", encoding="utf-8", newline="") as f:
            await f.write(text)
        return path
    except OSError as e:
        log.error(f"写入文件失败: {path}: {e}")
        raise


def dumps_json(data: Dict) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


# ========== 写出 ==========

async def save_report(path: Path, report: ReportFile) -> Path:
    return await _write_text(path, dumps_json(report.model_dump(mode="json")))


def ledger_frame(ledger: TradeLedger) -> pd.DataFrame:
    """账本表：date,action,daily_return,equity（equity 为当日收盘后的净值）"""
    return pd.DataFrame(
        {
            "date": [e.date.isoformat() for e in ledger.entries],
            "action": [e.action for e in ledger.entries],
            "daily_return": [e.daily_return for e in ledger.entries],
            "equity": equity_curve(ledger)[1:] if len(ledger) else np.array([]),
        }
    )


async def save_ledger(path: Path, ledger: TradeLedger) -> Path:
    return await _write_text(path, ledger_frame(ledger).to_csv(index=False, lineterminator="\n"))


def rationale_hash(rationale: str) -> str:
    return hashlib.sha256(rationale.encode("utf-8")).hexdigest()[:16]


def decisions_frame(decisions: Sequence[TradeDecision]) -> pd.DataFrame:
    """决策日志：date,action,effective_risk,rationale_hash,cited_ids"""
    rows = []
    for d in decisions:
        cited = {layer.value: d.cited_ids.get(layer, []) for layer in LAYER_ORDER}
        rows.append(
            {
                "date": d.date.isoformat(),
                "action": d.action.value,
                "effective_risk": d.effective_risk.value,
                "rationale_hash": rationale_hash(d.rationale),
                "cited_ids": json.dumps(cited, sort_keys=True, separators=(",", ":")),
            }
        )
    return pd.DataFrame(rows, columns=["date", "action", "effective_risk", "rationale_hash", "cited_ids"])


async def save_decisions(path: Path, decisions: Sequence[TradeDecision]) -> Path:
    return await _write_text(path, decisions_frame(decisions).to_csv(index=False, lineterminator="\n"))


async def save_snapshot(path: Path, memory: LayeredMemory) -> Path:
    """事件快照与元数据；可用 LayeredMemory.load_snapshot 恢复"""
    await _write_text(snapshot_meta_path(path), memory.meta_json())
    return await _write_text(path, memory.to_jsonl())


async def write_run_outputs(
    output_dir: Path,
    config: RunConfig,
    result: BacktestResult,
    memory: Optional[LayeredMemory] = None,
) -> Dict[str, Path]:
    """
    写出一次回测的全部文件

    Args:
        output_dir: 输出目录
        config: 运行配置
        result: 回测结果
        memory: Agent 的记忆库（为空时不写快照）

    Returns:
        文件名 -> 路径
    """
    output_dir = Path(output_dir)
    paths = {
        REPORT_FILE: await save_report(output_dir / REPORT_FILE, report_file(config.label, result.report, config)),
        BASELINE_REPORT_FILE: await save_report(
            output_dir / BASELINE_REPORT_FILE, report_file("B&H", result.baseline_report, config)
        ),
        LEDGER_FILE: await save_ledger(output_dir / LEDGER_FILE, result.ledger),
        BASELINE_LEDGER_FILE: await save_ledger(output_dir / BASELINE_LEDGER_FILE, result.baseline_ledger),
        DECISIONS_FILE: await save_decisions(output_dir / DECISIONS_FILE, result.decisions),
    }
    if memory is not None:
        paths[SNAPSHOT_FILE] = await save_snapshot(output_dir / SNAPSHOT_FILE, memory)
        paths[SNAPSHOT_META_FILE] = snapshot_meta_path(paths[SNAPSHOT_FILE])
    log.info(f"回测结果已写入: {output_dir}")
    return paths


# ========== 读取与对比 ==========

def load_report(path: Path) -> ReportFile:
    """读取报告文件，结构不符时抛出 SchemaMismatch"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"文件不存在: {path}")
    try:
        return ReportFile.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise SchemaMismatch(f"报告文件结构不符: {path}: {e}") from e


def _best_index(values: List[Optional[float]], higher_is_better: bool) -> Optional[int]:
    """唯一最优值的行号；并列或无有效值时返回 None"""
    present = [(i, v) for i, v in enumerate(values) if v is not None]
    if not present:
        return None
    target = max(v for _, v in present) if higher_is_better else min(v for _, v in present)
    winners = [i for i, v in present if v == target]
    return winners[0] if len(winners) == 1 else None


def comparison_frame(reports: Sequence[ReportFile]) -> pd.DataFrame:
    """
    对比表：每行一个报告，五个指标列，唯一最优值后加 '*'

    Args:
        reports: 至少两个报告

    Returns:
        DataFrame（已格式化为字符串）
    """
    if len(reports) < 2:
        raise ValueError("对比至少需要两个报告")
    table: Dict[str, List[str]] = {"Label": [r.label for r in reports]}
    for field, column, higher_is_better in METRIC_COLUMNS:
        values = [getattr(r.metrics, field) for r in reports]
        best = _best_index(values, higher_is_better)
        table[column] = [
            "n/a" if v is None else f"{v:.4f}{'*' if i == best else ''}"
            for i, v in enumerate(values)
        ]
    return pd.DataFrame(table)


def comparison_table(reports: Sequence[ReportFile]) -> str:
    return comparison_frame(reports).to_string(index=False)


# ========== 多次试验 ==========

def trials_summary(reports: Sequence[PerformanceReport], seeds: Sequence[int]) -> Dict:
    """各指标在多次试验上的均值（夏普比率只对有定义的试验取均值）"""
    summary: Dict = {"n_trials": len(reports), "seeds": list(seeds), "mean": {}}
    for field, _, _ in METRIC_COLUMNS:
        values = [getattr(r, field) for r in reports if getattr(r, field) is not None]
        summary["mean"][field] = float(np.mean(values)) if values else None
    return summary


async def save_trials_summary(path: Path, summary: Dict) -> Path:
    return await _write_text(path, dumps_json(summary))


async def save_table(path: Path, table: str) -> Path:
    return await _write_text(path, table + "\n")
