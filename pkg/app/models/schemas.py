"""
Pydantic 数据模型定义
"""
from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple, Literal
from datetime import date
from enum import Enum
import bisect

import numpy as np


class DocumentKind(str, Enum):
    """原始文档类型"""
    NEWS = "news"
    FILING_10Q = "10q"
    FILING_10K = "10k"


class SourceKind(str, Enum):
    """记忆事件来源"""
    NEWS = "news"
    FILING_10Q = "10q"
    FILING_10K = "10k"
    EXTENDED_REFLECTION = "extended_reflection"


class Layer(str, Enum):
    """长期记忆层"""
    SHALLOW = "shallow"
    INTERMEDIATE = "intermediate"
    DEEP = "deep"

    def deeper(self) -> Optional["Layer"]:
        """下一层（深层返回 None）"""
        index = LAYER_ORDER.index(self)
        return LAYER_ORDER[index + 1] if index + 1 < len(LAYER_ORDER) else None


LAYER_ORDER: List[Layer] = [Layer.SHALLOW, Layer.INTERMEDIATE, Layer.DEEP]

# 文档类型 -> 目标记忆层
KIND_TO_LAYER: Dict[DocumentKind, Layer] = {
    DocumentKind.NEWS: Layer.SHALLOW,
    DocumentKind.FILING_10Q: Layer.INTERMEDIATE,
    DocumentKind.FILING_10K: Layer.DEEP,
}


class Phase(str, Enum):
    """模拟阶段"""
    TRAIN = "train"
    TEST = "test"


class Direction(str, Enum):
    """训练阶段的市场标签"""
    BUY = "Buy"
    SELL = "Sell"


class TradeAction(str, Enum):
    """交易动作"""
    BUY = "Buy"
    SELL = "Sell"
    HOLD = "Hold"
    NOOP = "NoOp"

    @property
    def position(self) -> int:
        """单股头寸：+1 / -1 / 0"""
        return {"Buy": 1, "Sell": -1}.get(self.value, 0)


class RiskMode(str, Enum):
    """风险偏好设定"""
    RISK_SEEKING = "risk_seeking"
    RISK_AVERSE = "risk_averse"
    SELF_ADAPTIVE = "self_adaptive"


class EffectiveRisk(str, Enum):
    """当日实际生效的风险偏好"""
    SEEKING = "Seeking"
    AVERSE = "Averse"


class TemplateId(str, Enum):
    """Prompt 模板 ID"""
    SUMMARIZE = "summarize"
    IMMEDIATE_REFLECT_TRAIN = "immediate_reflect_train"
    IMMEDIATE_REFLECT_TEST = "immediate_reflect_test"
    EXTENDED_REFLECT = "extended_reflect"
    PROFILE_COMPOSE = "profile_compose"


class ProviderKind(str, Enum):
    """提供商类型"""
    MOCK = "mock"
    REMOTE = "remote"


# ========== 行情数据模型 ==========

class PriceRow(BaseModel):
    """单日 OHLCV"""
    date: date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: int


class PriceSeries(BaseModel):
    """按日期升序排列的价格序列"""
    ticker: str
    rows: List[PriceRow]

    _dates: List[date] = PrivateAttr(default_factory=list)

    def model_post_init(self, __context: Any) -> None:
        self._dates = [row.date for row in self.rows]

    @property
    def dates(self) -> List[date]:
        return self._dates

    @property
    def last_date(self) -> Optional[date]:
        return self._dates[-1] if self._dates else None

    def adj_closes(self) -> np.ndarray:
        return np.array([row.adj_close for row in self.rows], dtype=np.float64)

    def index_of(self, day: date) -> Optional[int]:
        """返回日期所在行号，不存在则返回 None"""
        i = bisect.bisect_left(self._dates, day)
        if i < len(self._dates) and self._dates[i] == day:
            return i
        return None

    def next_trading_date(self, day: date) -> Optional[date]:
        """day 当天（若为交易日）或之后的第一个交易日"""
        i = bisect.bisect_left(self._dates, day)
        return self._dates[i] if i < len(self._dates) else None

    def truncate(self, as_of: date) -> "PriceSeries":
        """只保留日期 <= as_of 的行"""
        end = bisect.bisect_right(self._dates, as_of)
        return PriceSeries(ticker=self.ticker, rows=self.rows[:end])

    def between(self, start: date, end: date) -> List[date]:
        """窗口 [start, end] 内的交易日"""
        lo = bisect.bisect_left(self._dates, start)
        hi = bisect.bisect_right(self._dates, end)
        return self._dates[lo:hi]


class RawDocument(BaseModel):
    """原始文档（新闻 / 10-Q / 10-K）"""
    id: str = Field(min_length=1)
    ticker: str
    date: date
    kind: DocumentKind
    text: str = Field(min_length=1)

    @property
    def target_layer(self) -> Layer:
        return KIND_TO_LAYER[self.kind]


class DailyBundle(BaseModel):
    """某一交易日可见的数据包"""
    date: date
    price_row: Optional[PriceRow] = None
    documents: List[RawDocument] = Field(default_factory=list)


class WarehouseSummary(BaseModel):
    """数据仓库概况"""
    tickers: List[str]
    price_rows: Dict[str, int]
    document_counts: Dict[str, int]
    price_start: Optional[date] = None
    price_end: Optional[date] = None
    document_start: Optional[date] = None
    document_end: Optional[date] = None


# ========== 记忆相关模型 ==========

IMPORTANCE_VALUES: Tuple[int, int, int] = (40, 60, 80)


class LayerParams(BaseModel):
    """记忆层常数"""
    q_stability: float = Field(gt=0, description="遗忘曲线稳定性（天）")
    alpha: float = Field(gt=0, lt=1, description="重要性衰减底数")
    importance_probs: Tuple[float, float, float] = Field(description="重要性 40/60/80 的概率")

    @field_validator("importance_probs")
    @classmethod
    def _check_probs(cls, probs: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(p < 0 for p in probs):
            raise ValueError("importance_probs 不能为负")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"importance_probs 之和必须为 1，当前为 {sum(probs)}")
        return probs


class MemoryEvent(BaseModel):
    """长期记忆中的一条事件"""
    id: int
    ticker: str
    layer: Layer
    text: str
    vector: List[float]
    anchor_date: date  # 晋级时重置
    created_date: date
    importance_value: Literal[40, 60, 80]
    access_bonus: int = 0  # 5 × total_access_count
    access_count: int = 0  # 距上次晋级的引用次数
    total_access_count: int = 0
    source_kind: SourceKind
    source_id: Optional[str] = None


class ScoredEvent(BaseModel):
    """检索打分结果（各子分数均已缩放到 [0,1]）"""
    event_id: int
    recency_score: float
    relevancy_score: float
    importance_score: float
    gamma: float


# ========== LLM 相关模型 ==========

class PromptRequest(BaseModel):
    """结构化 Prompt 请求"""
    template_id: TemplateId
    slots: Dict[str, str] = Field(default_factory=dict)
    temperature: float = Field(default=0.7, ge=0, le=2)
    # 引用校验用：每层提供给模型的记忆 ID
    offered_ids: Optional[Dict[Layer, List[int]]] = None


class StructuredResponse(BaseModel):
    """校验通过的结构化响应"""
    payload: Any
    raw_text: str
    attempts: int


class CitedMemoryIds(BaseModel):
    """每层被引用的记忆 ID"""
    model_config = {"extra": "forbid"}

    shallow: List[int] = Field(default_factory=list)
    intermediate: List[int] = Field(default_factory=list)
    deep: List[int] = Field(default_factory=list)

    def as_dict(self) -> Dict[Layer, List[int]]:
        return {
            Layer.SHALLOW: list(self.shallow),
            Layer.INTERMEDIATE: list(self.intermediate),
            Layer.DEEP: list(self.deep),
        }

    def all_ids(self) -> List[int]:
        return list(self.shallow) + list(self.intermediate) + list(self.deep)


class SummaryPayload(BaseModel):
    """Summarize 模板输出"""
    model_config = {"extra": "forbid"}

    summary: str = Field(min_length=1)
    sentiment: Literal["positive", "negative", "neutral"]


class TrainingReflectionPayload(BaseModel):
    """训练阶段即时反思输出（不含交易方向）"""
    model_config = {"extra": "forbid"}

    rationale: str = Field(min_length=1)
    cited_ids: CitedMemoryIds


class DecisionReflectionPayload(BaseModel):
    """测试阶段即时反思输出"""
    model_config = {"extra": "forbid"}

    direction: Literal["Buy", "Sell", "Hold"]
    rationale: str = Field(min_length=1)
    cited_ids: CitedMemoryIds


class ExtendedReflectionPayload(BaseModel):
    """扩展反思输出"""
    model_config = {"extra": "forbid"}

    trend_summary: str = Field(min_length=1)


class CharacterPayload(BaseModel):
    """ProfileCompose 模板输出"""
    model_config = {"extra": "forbid"}

    character: str = Field(min_length=1)


# ========== Agent 相关模型 ==========

class AgentProfile(BaseModel):
    """交易员画像"""
    ticker: str
    sector_background: str = Field(min_length=1)
    history_overview: str = Field(min_length=1)
    risk: RiskMode = RiskMode.SELF_ADAPTIVE
    switch_window: int = Field(default=3, ge=1)
    character_text: Optional[str] = None


class MarketIndication(BaseModel):
    """观察操作的输出"""
    phase: Phase
    train_label: Optional[Direction] = None
    trailing_return: Optional[float] = None
    window_m: Optional[int] = Field(default=None, ge=1, description="回看收益实际覆盖的交易日数")

    @model_validator(mode="after")
    def _check_phase_fields(self) -> "MarketIndication":
        if (self.train_label is not None) != (self.phase == Phase.TRAIN):
            raise ValueError("train_label 仅在训练阶段出现")
        if (self.trailing_return is not None) != (self.phase == Phase.TEST):
            raise ValueError("trailing_return 仅在测试阶段出现")
        if (self.window_m is not None) != (self.phase == Phase.TEST):
            raise ValueError("window_m 仅在测试阶段出现")
        return self


class WorldView(BaseModel):
    """单步决策时交给 Agent 的数据视图"""
    ticker: str
    prices: PriceSeries

    @property
    def max_visible_date(self) -> Optional[date]:
        return self.prices.last_date


class ImmediateReflection(BaseModel):
    """即时反思"""
    date: date
    phase: Phase
    direction: Optional[TradeAction] = None
    rationale: str
    cited_ids: Dict[Layer, List[int]] = Field(default_factory=dict)
    degraded: bool = False


class ExtendedReflection(BaseModel):
    """扩展反思（存入深层记忆）"""
    date: date
    window_m: int
    window_dates: List[date]
    trend_summary: str
    window_return: float
    event_id: Optional[int] = None


class TradeDecision(BaseModel):
    """每日决策"""
    date: date
    phase: Phase
    action: TradeAction
    effective_risk: EffectiveRisk
    rationale: str
    cited_ids: Dict[Layer, List[int]] = Field(default_factory=dict)
    retrieved_counts: Dict[Layer, int] = Field(default_factory=dict)
    layer_sizes: Dict[Layer, int] = Field(default_factory=dict)


# ========== 回测相关模型 ==========

class LedgerEntry(BaseModel):
    """账本条目：r_t = ln(p_{t+1}/p_t) × action_t"""
    date: date
    action: Literal[-1, 0, 1]
    daily_return: float


class TradeLedger(BaseModel):
    """单股交易账本"""
    entries: List[LedgerEntry] = Field(default_factory=list)

    def returns(self) -> np.ndarray:
        return np.array([e.daily_return for e in self.entries], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)


class PerformanceReport(BaseModel):
    """绩效指标（百分比字段单位为 %）"""
    cumulative_return: float
    sharpe: Optional[float] = None
    daily_volatility: float
    annualized_volatility: float
    max_drawdown: float
    sharpe_degenerate: bool = False
    sharpe_annualized: bool = True
    n_days: int


class ReportFile(BaseModel):
    """report.json 文件结构"""
    model_config = {"extra": "forbid"}

    label: str
    metrics: PerformanceReport
    metadata: Dict[str, Any] = Field(default_factory=dict)
