"""
Agent 服务
FinMem 交易 Agent：画像构建、风险偏好切换、工作记忆（摘要 / 观察 / 反思）与每日决策
"""
from abc import ABC, abstractmethod
from typing import List, Dict, Optional, Sequence, Tuple
from datetime import date
import math

from app.config import RunConfig
from app.exceptions import EmptyWindow, ProviderUnavailable, ValidationExhausted
from app.models.schemas import (
    LAYER_ORDER,
    AgentProfile,
    DailyBundle,
    EffectiveRisk,
    ExtendedReflection,
    ImmediateReflection,
    Layer,
    MarketIndication,
    Phase,
    PriceSeries,
    PromptRequest,
    RawDocument,
    RiskMode,
    SourceKind,
    TemplateId,
    TradeAction,
    TradeDecision,
    WorldView,
)
from app.services.embedding_service import EmbeddingService
from app.services.llm_gateway import LLMGateway, load_risk_paragraph
from app.services.market_data import MarketWarehouse, direction_label, trailing_cumulative_return
from app.services.memory_service import LayeredMemory, RetrievedMemories
from app.utils.async_helper import TaskQueue
from app.utils.logger import log
from app.utils.rng import RngStreams


VALIDATION_FAILURE = "validation failure"
SELF_ADAPTIVE_PARAGRAPH = (
    "Your risk inclination adapts to recent performance: risk-seeking while the cumulative return "
    "of your recent trades is non-negative, risk-averse as soon as it falls below zero."
)
_GATEWAY_FAILURES = (ValidationExhausted, ProviderUnavailable)


# ========== 画像与风险偏好 ==========

def build_profile(
    ticker: str,
    warehouse: MarketWarehouse,
    train_start: date,
    train_end: date,
    risk: RiskMode = RiskMode.SELF_ADAPTIVE,
    switch_window: int = 3,
) -> AgentProfile:
    """
    构建交易员画像

    Args:
        ticker: 股票代码
        warehouse: 数据仓库
        train_start: 训练窗口开始
        train_end: 训练窗口结束
        risk: 风险偏好设定
        switch_window: 自适应切换回看天数

    Returns:
        AgentProfile（历史概况含训练窗口首末复权收盘价与累计收益）
    """
    sector = warehouse.sector_text(ticker)
    prices = warehouse.prices(ticker)
    days = prices.between(train_start, train_end)
    if len(days) < 2:
        raise EmptyWindow(f"训练窗口 {train_start} ~ {train_end} 只有 {len(days)} 个交易日")

    first = prices.rows[prices.index_of(days[0])].adj_close
    last = prices.rows[prices.index_of(days[-1])].adj_close
    cumulative = math.log(last / first)
    overview = (
        f"During the training period from {days[0].isoformat()} to {days[-1].isoformat()} "
        f"({len(days)} trading days) {ticker} moved from an adjusted close of {first:.2f} "
        f"to {last:.2f}, a cumulative log return of {format_return(cumulative)}."
    )
    return AgentProfile(
        ticker=ticker,
        sector_background=sector,
        history_overview=overview,
        risk=risk,
        switch_window=switch_window,
    )


def format_return(value: float) -> str:
    """对数收益格式化为百分比文本"""
    return f"{100 * value:.2f}%"


def effective_risk(profile: AgentProfile, realized_returns: Sequence[float]) -> EffectiveRisk:
    """
    当日生效的风险偏好

    固定模式返回自身；自适应模式在最近 switch_window 天已实现收益之和严格小于 0 时为 Averse

    Args:
        profile: 交易员画像
        realized_returns: 按日期排列的已实现日收益（缺失日按 0 计）

    Returns:
        EffectiveRisk
    """
    if profile.risk == RiskMode.RISK_SEEKING:
        return EffectiveRisk.SEEKING
    if profile.risk == RiskMode.RISK_AVERSE:
        return EffectiveRisk.AVERSE
    window = list(realized_returns)[-profile.switch_window:]
    return EffectiveRisk.AVERSE if math.fsum(window) < 0 else EffectiveRisk.SEEKING


def risk_paragraph(risk: EffectiveRisk) -> str:
    name = "risk_seeking" if risk == EffectiveRisk.SEEKING else "risk_averse"
    return load_risk_paragraph(name)


def compose_character_locally(profile: AgentProfile, risk_text: str) -> str:
    """ProfileCompose 不可用时的本地角色描述"""
    parts = [
        f"You are a seasoned trader specializing in {profile.ticker}.",
        profile.sector_background,
        profile.history_overview,
        risk_text,
    ]
    return " ".join(p.strip() for p in parts if p.strip())


# ========== 观察 ==========

def observe(phase: Phase, prices: PriceSeries, day: date, m: int) -> MarketIndication:
    """
    市场观察

    训练阶段读取次日价格得到方向标签；测试阶段只使用 day 及之前的价格计算 m 日累计收益
    """
    if phase == Phase.TRAIN:
        return MarketIndication(phase=phase, train_label=direction_label(prices, day))
    return MarketIndication(phase=phase, trailing_return=trailing_cumulative_return(prices, day, m), window_m=m)


def format_memories(memories: RetrievedMemories, layer: Layer) -> str:
    lines = [
        f"[id={event.id}] {' '.join(event.text.split())}"
        for event, _ in memories.get(layer, [])
    ]
    return "\n".join(lines) if lines else "(none)"


def render_window_review(
    ticker: str,
    window_m: int,
    day: date,
    directions: Sequence[str],
    window_return: float,
) -> str:
    counts = ", ".join(f"{d} x{list(directions).count(d)}" for d in ("Buy", "Sell", "Hold"))
    return (
        f"{ticker} review of the last {window_m} trading days ending {day.isoformat()}: "
        f"decisions {counts}; realized window log return {100 * window_return:.4f} percent."
    )


# ========== Agent ==========

class BaseTradingAgent(ABC):
    """回测驱动的 Agent 接口"""

    decisions: List[TradeDecision]

    async def initialize(self, warehouse: MarketWarehouse) -> None:
        """模拟开始前调用一次"""

    async def prepare_day(self, day: date, bundle: DailyBundle) -> None:
        """处理当日新到达的文档"""

    def record_realized_return(self, day: date, daily_return: float) -> None:
        """记录 day 的已实现收益（在之后的交易日才会调用）"""

    @abstractmethod
    async def step(self, day: date, phase: Phase, world: WorldView) -> TradeDecision:
        pass


class FinMemAgent(BaseTradingAgent):
    """分层记忆交易 Agent"""

    def __init__(
        self,
        config: RunConfig,
        gateway: LLMGateway,
        embedder: EmbeddingService,
        memory: Optional[LayeredMemory] = None,
        rng: Optional[RngStreams] = None,
    ):
        self.config = config
        self.ticker = config.ticker
        self.gateway = gateway
        self.embedder = embedder
        self.memory = memory or LayeredMemory(config.layers, config.promotion_threshold)
        self.rng = rng or RngStreams(config.seed)

        self.profile: Optional[AgentProfile] = None
        self.decisions: List[TradeDecision] = []
        self.reflections: List[ImmediateReflection] = []
        self.extended_reflections: List[ExtendedReflection] = []
        self.realized_returns: Dict[date, float] = {}
        self.skipped_documents: List[str] = []

    # ---------- 画像 ----------

    async def initialize(self, warehouse: MarketWarehouse) -> None:
        self.profile = build_profile(
            self.ticker,
            warehouse,
            self.config.train_start,
            self.config.train_end,
            self.config.risk,
            self.config.switch_window,
        )
        self.profile.character_text = await self.compose_character(self.profile)
        log.info(f"{self.ticker} 画像构建完成: risk={self.profile.risk.value}")

    def _base_risk_text(self, profile: AgentProfile) -> str:
        if profile.risk == RiskMode.RISK_SEEKING:
            return risk_paragraph(EffectiveRisk.SEEKING)
        if profile.risk == RiskMode.RISK_AVERSE:
            return risk_paragraph(EffectiveRisk.AVERSE)
        return SELF_ADAPTIVE_PARAGRAPH

    async def compose_character(self, profile: AgentProfile) -> str:
        """通过 ProfileCompose 模板生成角色描述，失败时回退到本地拼接"""
        risk_text = self._base_risk_text(profile)
        request = PromptRequest(
            template_id=TemplateId.PROFILE_COMPOSE,
            slots={
                "ticker": profile.ticker,
                "sector_background": profile.sector_background,
                "history_overview": profile.history_overview,
                "risk_paragraph": risk_text,
            },
            temperature=self.config.temperature,
        )
        try:
            response = await self.gateway.complete(request)
            return response.payload.character
        except _GATEWAY_FAILURES as e:
            log.warning(f"角色描述生成失败，使用本地模板: {e}")
            return compose_character_locally(profile, risk_text)

    def _character(self, risk: EffectiveRisk) -> str:
        base = self.profile.character_text or compose_character_locally(self.profile, "")
        return f"{base}\n\n{risk_paragraph(risk)}"

    # ---------- 风险偏好 ----------

    def trailing_realized_returns(self, day: date, prices: PriceSeries) -> List[float]:
        """day 之前最近 switch_window 个交易日的已实现收益（缺失按 0）"""
        previous = [d for d in prices.dates if d < day][-self.config.switch_window:]
        return [self.realized_returns.get(d, 0.0) for d in previous]

    def record_realized_return(self, day: date, daily_return: float) -> None:
        self.realized_returns[day] = daily_return

    # ---------- 摘要 ----------

    async def summarize(self, document: RawDocument) -> Tuple[str, Layer]:
        """
        文档摘要

        Returns:
            (洞察文本, 目标记忆层)
        """
        request = PromptRequest(
            template_id=TemplateId.SUMMARIZE,
            slots={
                "ticker": document.ticker,
                "kind": document.kind.value,
                "date": document.date.isoformat(),
                "document": document.text,
            },
            temperature=self.config.temperature,
        )
        response = await self.gateway.complete(request)
        insight = f"[{document.kind.value} {document.date.isoformat()}] {response.payload.summary}"
        return insight, document.target_layer

    async def prepare_day(self, day: date, bundle: DailyBundle) -> None:
        """
        摘要当日文档（并发）→ 按文档 ID 顺序写入记忆 → 衰减清理

        Args:
            day: 交易日
            bundle: 当日数据包
        """
        documents = sorted(bundle.documents, key=lambda d: d.id)
        queue = TaskQueue(self.config.summarize_concurrency)
        for document in documents:
            await queue.add_task(self.summarize(document))
        results = await queue.wait_all()

        importance_rng = self.rng.stream("importance")
        for document, result in zip(documents, results):
            if isinstance(result, _GATEWAY_FAILURES):
                self.skipped_documents.append(document.id)
                log.warning(f"{day} 文档 {document.id} 摘要失败，已跳过: {result}")
                continue
            if isinstance(result, BaseException):
                raise result
            insight, layer = result
            vector = await self.embedder.embed_text(insight)
            self.memory.ingest(
                insight,
                document.ticker,
                layer,
                day,
                vector,
                importance_rng,
                source_kind=SourceKind(document.kind.value),
                source_id=document.id,
            )

        self.memory.decay_and_purge(day)

    # ---------- 检索 ----------

    def query_text(self, day: date, risk: EffectiveRisk) -> str:
        return (
            f"investment decision on {self.ticker} on {day.isoformat()}. "
            f"{risk_paragraph(risk)}"
        )

    async def retrieve(self, day: date, risk: EffectiveRisk) -> RetrievedMemories:
        query_vector = await self.embedder.embed_text(self.query_text(day, risk))
        return self.memory.retrieve_top_k(self.ticker, query_vector, day, self.config.k_top)

    # ---------- 反思 ----------

    async def reflect_immediate(
        self,
        indication: MarketIndication,
        retrieved: RetrievedMemories,
        day: date,
        risk: EffectiveRisk,
    ) -> ImmediateReflection:
        """
        即时反思：合并市场观察与检索到的记忆，测试阶段给出交易方向

        被引用的记忆会登记访问；校验失败时测试阶段降级为 Hold
        """
        offered = {layer: [event.id for event, _ in retrieved.get(layer, [])] for layer in LAYER_ORDER}
        slots = {
            "character": self._character(risk),
            "effective_risk": risk.value,
            "ticker": self.ticker,
            "date": day.isoformat(),
            "shallow_memories": format_memories(retrieved, Layer.SHALLOW),
            "intermediate_memories": format_memories(retrieved, Layer.INTERMEDIATE),
            "deep_memories": format_memories(retrieved, Layer.DEEP),
        }
        if indication.phase == Phase.TRAIN:
            template = TemplateId.IMMEDIATE_REFLECT_TRAIN
            slots["train_label"] = indication.train_label.value
        else:
            template = TemplateId.IMMEDIATE_REFLECT_TEST
            slots["trailing_return"] = repr(indication.trailing_return)
            slots["window_m"] = str(indication.window_m)

        request = PromptRequest(
            template_id=template,
            slots=slots,
            temperature=self.config.temperature,
            offered_ids=offered,
        )
        try:
            response = await self.gateway.complete(request)
        except _GATEWAY_FAILURES as e:
            log.warning(f"{day} 即时反思失败，降级处理: {e}")
            return ImmediateReflection(
                date=day,
                phase=indication.phase,
                direction=TradeAction.HOLD if indication.phase == Phase.TEST else None,
                rationale=VALIDATION_FAILURE,
                degraded=True,
            )

        payload = response.payload
        cited = payload.cited_ids.as_dict()
        self.memory.register_access(payload.cited_ids.all_ids(), day)
        direction = TradeAction(payload.direction) if indication.phase == Phase.TEST else None
        return ImmediateReflection(
            date=day,
            phase=indication.phase,
            direction=direction,
            rationale=payload.rationale,
            cited_ids=cited,
        )

    async def reflect_extended(self, day: date) -> ExtendedReflection:
        """
        扩展反思：回顾最近 M 个测试日的即时反思与已实现收益，写入深层记忆

        窗口收益只累加 day 之前已实现的日收益
        """
        window = [r for r in self.reflections if r.phase == Phase.TEST][-self.config.m_window:]
        window_dates = [r.date for r in window]
        directions = [(r.direction or TradeAction.HOLD).value for r in window]
        window_return = math.fsum(self.realized_returns.get(d, 0.0) for d in window_dates if d < day)

        request = PromptRequest(
            template_id=TemplateId.EXTENDED_REFLECT,
            slots={
                "character": self.profile.character_text or "",
                "ticker": self.ticker,
                "date": day.isoformat(),
                "window_m": str(len(window)),
                "window_dates": ", ".join(d.isoformat() for d in window_dates),
                "directions": ", ".join(directions),
                "reflections": "\n".join(
                    f"{r.date.isoformat()} | {(r.direction or TradeAction.HOLD).value} | {r.rationale}"
                    for r in window
                ),
                "window_return": repr(window_return),
            },
            temperature=self.config.temperature,
        )
        try:
            response = await self.gateway.complete(request)
            summary = response.payload.trend_summary
        except _GATEWAY_FAILURES as e:
            log.warning(f"{day} 扩展反思失败，使用本地汇总: {e}")
            summary = render_window_review(self.ticker, len(window), day, directions, window_return)

        text = f"[extended review {day.isoformat()}] {summary}"
        vector = await self.embedder.embed_text(text)
        event = self.memory.ingest(
            text,
            self.ticker,
            Layer.DEEP,
            day,
            vector,
            self.rng.stream("importance"),
            source_kind=SourceKind.EXTENDED_REFLECTION,
            source_id=f"extended:{day.isoformat()}",
        )
        reflection = ExtendedReflection(
            date=day,
            window_m=len(window),
            window_dates=window_dates,
            trend_summary=summary,
            window_return=window_return,
            event_id=event.id,
        )
        self.extended_reflections.append(reflection)
        return reflection

    # ---------- 决策 ----------

    def _observation_window(self, prices: PriceSeries, day: date) -> int:
        index = prices.index_of(day)
        return max(1, min(self.config.m_window, index or 0))

    async def step(self, day: date, phase: Phase, world: WorldView) -> TradeDecision:
        """
        单个交易日的决策流程

        训练阶段记录 NoOp（记忆与引用照常更新）；测试阶段动作来自即时反思

        Args:
            day: 交易日
            phase: 模拟阶段
            world: 价格视图（测试阶段不含 day 之后的数据）

        Returns:
            TradeDecision
        """
        if self.profile is None:
            raise RuntimeError("Agent 尚未初始化")

        risk = effective_risk(self.profile, self.trailing_realized_returns(day, world.prices))
        indication = observe(phase, world.prices, day, self._observation_window(world.prices, day))
        retrieved = await self.retrieve(day, risk)
        layer_sizes = self.memory.layer_sizes(self.ticker)

        reflection = await self.reflect_immediate(indication, retrieved, day, risk)
        self.reflections.append(reflection)

        if phase == Phase.TEST:
            action = reflection.direction or TradeAction.HOLD
            await self.reflect_extended(day)
        else:
            action = TradeAction.NOOP

        decision = TradeDecision(
            date=day,
            phase=phase,
            action=action,
            effective_risk=risk,
            rationale=reflection.rationale,
            cited_ids=reflection.cited_ids,
            retrieved_counts={layer: len(retrieved.get(layer, [])) for layer in LAYER_ORDER},
            layer_sizes=layer_sizes,
        )
        self.decisions.append(decision)
        log.debug(f"{day} [{phase.value}] {action.value} ({risk.value})")
        return decision
