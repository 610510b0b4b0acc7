"""
回测服务
按日驱动训练 / 测试两个阶段，维护单股动作账本，计算绩效指标并与买入持有基线对比
"""
from typing import List, Optional, Tuple
from datetime import date
from pathlib import Path
import math

import numpy as np
from pydantic import BaseModel, Field

from app.config import RunConfig
from app.exceptions import (
    CausalityViolation,
    DataError,
    EmptyLedger,
    InsufficientData,
    OverlappingWindows,
    WindowOutOfRange,
    ZeroVolatility,
)
from app.models.schemas import (
    DailyBundle,
    LedgerEntry,
    PerformanceReport,
    Phase,
    PriceSeries,
    ReportFile,
    TradeAction,
    TradeDecision,
    TradeLedger,
    WorldView,
)
from app.services.agent_service import BaseTradingAgent, FinMemAgent
from app.services.embedding_service import create_embedding_service
from app.services.llm_factory import LLMFactory
from app.services.llm_gateway import LLMGateway
from app.services.market_data import MarketWarehouse, daily_log_return
from app.utils.logger import log


TRADING_DAYS_PER_YEAR = 252
SQRT_TRADING_DAYS = math.sqrt(TRADING_DAYS_PER_YEAR)


# ========== 绩效指标 ==========

def _returns(ledger: TradeLedger) -> np.ndarray:
    return ledger.returns()


def cumulative_return(ledger: TradeLedger) -> float:
    """累计收益（%）= 100 × Σ r_t"""
    if len(ledger) == 0:
        raise EmptyLedger("账本为空，无法计算累计收益")
    return 100.0 * float(np.sum(_returns(ledger)))


def sharpe(ledger: TradeLedger, risk_free_daily: float = 0.0, annualize: bool = True) -> float:
    """
    夏普比率 mean(r - rf) / std(r)，标准差使用 n-1 无偏估计

    Args:
        ledger: 交易账本
        risk_free_daily: 日无风险收益率
        annualize: 是否乘以 √252

    Returns:
        夏普比率
    """
    returns = _returns(ledger)
    if returns.size < 2:
        raise InsufficientData(f"夏普比率至少需要 2 个交易日，当前 {returns.size}")
    std = float(np.std(returns, ddof=1))
    if np.ptp(returns) == 0.0 or std == 0.0:
        raise ZeroVolatility("收益序列标准差为零")
    ratio = float(np.mean(returns - risk_free_daily)) / std
    return ratio * SQRT_TRADING_DAYS if annualize else ratio


def volatility(ledger: TradeLedger) -> Tuple[float, float]:
    """
    波动率（%）

    Returns:
        (日波动率, 年化波动率 = 日波动率 × √252)
    """
    returns = _returns(ledger)
    if returns.size < 2:
        raise InsufficientData(f"波动率至少需要 2 个交易日，当前 {returns.size}")
    if np.ptp(returns) == 0.0:
        return 0.0, 0.0
    daily = 100.0 * float(np.std(returns, ddof=1))
    return daily, daily * SQRT_TRADING_DAYS


def equity_curve(ledger: TradeLedger) -> np.ndarray:
    """V_t = exp(Σ_{s≤t} r_s)，首元素为 V_0 = 1"""
    return np.exp(np.concatenate(([0.0], np.cumsum(_returns(ledger)))))


def max_drawdown(ledger: TradeLedger) -> float:
    """最大回撤（%），基于复利净值曲线并包含 V_0 = 1"""
    if len(ledger) == 0:
        raise EmptyLedger("账本为空，无法计算最大回撤")
    equity = equity_curve(ledger)
    peaks = np.maximum.accumulate(equity)
    return 100.0 * float(np.max((peaks - equity) / peaks))


def build_report(
    ledger: TradeLedger,
    risk_free_daily: float = 0.0,
    annualize: bool = True,
) -> PerformanceReport:
    """计算全部指标；零方差时夏普比率标记为退化而不是抛错"""
    try:
        sharpe_value: Optional[float] = sharpe(ledger, risk_free_daily, annualize)
        degenerate = False
    except (ZeroVolatility, InsufficientData):
        sharpe_value = None
        degenerate = True

    try:
        daily_vol, annual_vol = volatility(ledger)
    except InsufficientData:
        daily_vol, annual_vol = 0.0, 0.0

    return PerformanceReport(
        cumulative_return=cumulative_return(ledger),
        sharpe=sharpe_value,
        daily_volatility=daily_vol,
        annualized_volatility=annual_vol,
        max_drawdown=max_drawdown(ledger),
        sharpe_degenerate=degenerate,
        sharpe_annualized=annualize,
        n_days=len(ledger),
    )


# ========== 模拟 ==========

class BacktestResult(BaseModel):
    """一次回测的全部产物"""
    ledger: TradeLedger
    baseline_ledger: TradeLedger
    report: PerformanceReport
    baseline_report: PerformanceReport
    decisions: List[TradeDecision] = Field(default_factory=list)
    visible_dates: List[Tuple[date, date]] = Field(default_factory=list)


def validate_windows(config: RunConfig, prices: PriceSeries) -> Tuple[List[date], List[date]]:
    """
    校验训练 / 测试窗口

    Returns:
        (训练日列表, 测试日列表)
    """
    if config.train_end >= config.test_start:
        raise OverlappingWindows(
            f"训练窗口 {config.train_start}~{config.train_end} 必须早于测试窗口 "
            f"{config.test_start}~{config.test_end}"
        )
    if not prices.dates:
        raise WindowOutOfRange(f"{prices.ticker} 没有价格数据")
    first, last = prices.dates[0], prices.dates[-1]
    if config.train_start < first:
        raise WindowOutOfRange(f"train_start {config.train_start} 早于数据起点 {first}")
    if config.test_end >= last:
        raise WindowOutOfRange(f"test_end {config.test_end} 必须早于最后一个交易日 {last}（需要次日价格）")

    train_days = prices.between(config.train_start, config.train_end)
    test_days = prices.between(config.test_start, config.test_end)
    if not train_days:
        raise WindowOutOfRange(f"训练窗口 {config.train_start}~{config.train_end} 内没有交易日")
    if not test_days:
        raise WindowOutOfRange(f"测试窗口 {config.test_start}~{config.test_end} 内没有交易日")
    return train_days, test_days


def _check_bundle(bundle: DailyBundle, day: date) -> None:
    late = [d.id for d in bundle.documents if d.date > day]
    if late:
        raise CausalityViolation(f"{day} 的数据包包含未来文档: {late}")


async def run(
    config: RunConfig,
    agent: BaseTradingAgent,
    warehouse: MarketWarehouse,
) -> BacktestResult:
    """
    执行回测：训练循环（建立记忆，NoOp 账本）→ 测试循环（决策）→ 计算报告

    Args:
        config: 运行配置
        agent: 交易 Agent
        warehouse: 数据仓库

    Returns:
        BacktestResult
    """
    prices = warehouse.prices(config.ticker)
    train_days, test_days = validate_windows(config, prices)
    log.info(
        f"开始回测 {config.ticker}: 训练 {len(train_days)} 天, 测试 {len(test_days)} 天, "
        f"K={config.k_top}, M={config.m_window}, risk={config.risk.value}"
    )

    await agent.initialize(warehouse)
    previous_day: Optional[date] = None
    visible_dates: List[Tuple[date, date]] = []

    for day in train_days:
        bundle = warehouse.bundle(config.ticker, day, previous_day)
        _check_bundle(bundle, day)
        await agent.prepare_day(day, bundle)
        horizon = prices.dates[prices.index_of(day) + 1]
        await agent.step(day, Phase.TRAIN, WorldView(ticker=config.ticker, prices=prices.truncate(horizon)))
        previous_day = day

    ledger = TradeLedger()
    baseline = TradeLedger()
    for day in test_days:
        if ledger.entries:
            last = ledger.entries[-1]
            agent.record_realized_return(last.date, last.daily_return)

        bundle = warehouse.bundle(config.ticker, day, previous_day)
        world = WorldView(ticker=config.ticker, prices=prices.truncate(day))
        visible_dates.append((day, world.max_visible_date))
        if config.causality_guard:
            _check_bundle(bundle, day)
            if world.max_visible_date > day:
                raise CausalityViolation(f"{day} 的价格视图包含 {world.max_visible_date} 的数据")

        await agent.prepare_day(day, bundle)
        decision = await agent.step(day, Phase.TEST, world)
        position = decision.action.position if decision.action != TradeAction.NOOP else 0

        log_return = daily_log_return(prices, day)
        ledger.entries.append(
            LedgerEntry(date=day, action=position, daily_return=position * log_return if position else 0.0)
        )
        baseline.entries.append(LedgerEntry(date=day, action=1, daily_return=log_return))
        previous_day = day

    report = build_report(ledger, config.risk_free_daily, config.annualize_sharpe)
    baseline_report = build_report(baseline, config.risk_free_daily, config.annualize_sharpe)
    log.info(
        f"回测完成 {config.ticker}: 累计收益 {report.cumulative_return:.4f}% "
        f"(B&H {baseline_report.cumulative_return:.4f}%)"
    )
    return BacktestResult(
        ledger=ledger,
        baseline_ledger=baseline,
        report=report,
        baseline_report=baseline_report,
        decisions=list(agent.decisions),
        visible_dates=visible_dates,
    )


def create_agent(config: RunConfig) -> FinMemAgent:
    """按配置组装提供商、网关与 Agent"""
    provider = LLMFactory.create(config.provider, config.rulebook_path)
    gateway = LLMGateway(provider, max_retries=config.max_validation_retries)
    embedder = create_embedding_service(config.provider, config.embedding_dimension)
    return FinMemAgent(config, gateway, embedder)


def load_warehouse(config: RunConfig) -> MarketWarehouse:
    """加载配置指向的数据；行情或文档文件缺失时提示先生成合成数据集"""
    for path in (Path(config.prices_path), Path(config.documents_path)):
        if not path.exists():
            raise DataError(
                f"文件不存在: {path}（合成数据集需先运行 python generate_fixtures.py --out {path.parent}）"
            )
    return MarketWarehouse.from_files(
        {config.ticker: config.prices_path},
        config.documents_path,
        config.metadata_path,
    )


async def run_from_config(config: RunConfig) -> Tuple[BacktestResult, FinMemAgent]:
    """加载数据、组装 Agent 并执行回测"""
    warehouse = load_warehouse(config)
    agent = create_agent(config)
    result = await run(config, agent, warehouse)
    return result, agent


def report_file(label: str, report: PerformanceReport, config: RunConfig) -> ReportFile:
    """报告文件内容：指标 + 运行元数据（不含时间戳）"""
    metadata = {
        "ticker": config.ticker,
        "seed": config.seed,
        "train_window": [config.train_start.isoformat(), config.train_end.isoformat()],
        "test_window": [config.test_start.isoformat(), config.test_end.isoformat()],
        "k_top": config.k_top,
        "m_window": config.m_window,
        "risk": config.risk.value,
        "sharpe_annualized": config.annualize_sharpe,
        # 不含 output_dir
        "config": config.model_dump(mode="json", exclude={"output_dir"}),
    }
    return ReportFile(label=label, metrics=report, metadata=metadata)
