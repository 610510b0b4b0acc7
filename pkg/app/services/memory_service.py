"""
分层长期记忆服务
事件写入（按层重要性采样）、综合打分检索（时近性 + 相关性 + 重要性）、
衰减清理、引用计数加分与晋级
"""
from abc import ABC, abstractmethod
from typing import List, Dict, Optional, Tuple, Iterable
from datetime import date
from pathlib import Path
import json
import math

import numpy as np

from app.exceptions import DimensionMismatch, EmptyText, FutureEvent, UnknownEventId
from app.models.schemas import (
    IMPORTANCE_VALUES,
    LAYER_ORDER,
    Layer,
    LayerParams,
    MemoryEvent,
    ScoredEvent,
    SourceKind,
)
from app.services.embedding_service import cosine
from app.utils.logger import log
from app.utils.rng import UniformSource, sample_categorical


ACCESS_BONUS_POINTS = 5
IMPORTANCE_NORMALIZER = 100.0
RECENCY_PURGE_THRESHOLD = 0.05
IMPORTANCE_PURGE_THRESHOLD = 5.0

RetrievedMemories = Dict[Layer, List[Tuple[MemoryEvent, ScoredEvent]]]

_DEFAULT_SOURCE = {
    Layer.SHALLOW: SourceKind.NEWS,
    Layer.INTERMEDIATE: SourceKind.FILING_10Q,
    Layer.DEEP: SourceKind.FILING_10K,
}


# ========== 打分函数 ==========

def _elapsed_days(event: MemoryEvent, query_date: date) -> int:
    delta = (query_date - event.anchor_date).days
    if delta < 0:
        raise FutureEvent(f"查询日期 {query_date} 早于事件 {event.id} 的锚定日期 {event.anchor_date}")
    return delta


def recency_score(event: MemoryEvent, query_date: date, params: LayerParams) -> float:
    """exp(-δ / Q)"""
    return math.exp(-_elapsed_days(event, query_date) / params.q_stability)


def relevancy_score(event: MemoryEvent, query_vector: np.ndarray) -> float:
    """max(0, cosine)，负相关截断为 0"""
    return max(0.0, cosine(np.asarray(event.vector, dtype=np.float64), query_vector))


def importance_score_raw(event: MemoryEvent, query_date: date, params: LayerParams) -> float:
    """(v + bonus) × α^δ，未缩放"""
    delta = _elapsed_days(event, query_date)
    return (event.importance_value + event.access_bonus) * params.alpha ** delta


def scale_importance(raw: float) -> float:
    return min(1.0, raw / IMPORTANCE_NORMALIZER)


def retrieval_score(
    event: MemoryEvent,
    query_vector: np.ndarray,
    query_date: date,
    params: LayerParams,
    relevancy: Optional[float] = None,
) -> ScoredEvent:
    """
    综合检索分 γ = 时近性 + 相关性 + 缩放后的重要性

    Args:
        event: 记忆事件
        query_vector: 查询向量
        query_date: 查询日期
        params: 事件所在层的常数
        relevancy: 预先算好的相关性（可选）

    Returns:
        ScoredEvent
    """
    recency = recency_score(event, query_date, params)
    if relevancy is None:
        relevancy = relevancy_score(event, query_vector)
    importance = scale_importance(importance_score_raw(event, query_date, params))
    return ScoredEvent(
        event_id=event.id,
        recency_score=recency,
        relevancy_score=relevancy,
        importance_score=importance,
        gamma=recency + relevancy + importance,
    )


# ========== 向量索引 ==========

class VectorIndex(ABC):
    """向量索引接口（便于替换为外部向量库）"""

    @abstractmethod
    def add(self, event_id: int, vector: np.ndarray) -> None:
        pass

    @abstractmethod
    def remove(self, event_id: int) -> None:
        pass

    @abstractmethod
    def similarities(self, event_ids: Iterable[int], query_vector: np.ndarray) -> Dict[int, float]:
        """返回各事件与查询向量的余弦相似度"""
        pass


class InMemoryVectorIndex(VectorIndex):
    """进程内线性扫描索引"""

    def __init__(self):
        self._vectors: Dict[int, np.ndarray] = {}

    def add(self, event_id: int, vector: np.ndarray) -> None:
        self._vectors[event_id] = np.asarray(vector, dtype=np.float64)

    def remove(self, event_id: int) -> None:
        self._vectors.pop(event_id, None)

    def similarities(self, event_ids: Iterable[int], query_vector: np.ndarray) -> Dict[int, float]:
        return {i: cosine(self._vectors[i], query_vector) for i in event_ids}

    def __len__(self) -> int:
        return len(self._vectors)


# ========== 分层记忆库 ==========

def snapshot_meta_path(path: Path) -> Path:
    """事件快照旁的元数据文件：memory_snapshot.jsonl → memory_snapshot.meta.json"""
    path = Path(path)
    return path.with_name(f"{path.stem}.meta.json")


class LayeredMemory:
    """
    三层长期记忆库

    单写者：模拟循环负责修改；两次修改之间允许并发只读打分
    """

    def __init__(
        self,
        layer_params: Dict[Layer, LayerParams],
        promotion_threshold: int = 3,
        index: Optional[VectorIndex] = None,
    ):
        missing = [layer for layer in Layer if layer not in layer_params]
        if missing:
            raise ValueError(f"缺少记忆层常数: {missing}")
        if promotion_threshold < 1:
            raise ValueError(f"promotion_threshold 至少为 1: {promotion_threshold}")
        self.layer_params = dict(layer_params)
        self.promotion_threshold = promotion_threshold
        self.index = index or InMemoryVectorIndex()
        self.events: Dict[int, MemoryEvent] = {}
        self._next_id = 0
        self._dimension: Optional[int] = None

    def __len__(self) -> int:
        return len(self.events)

    def __contains__(self, event_id: int) -> bool:
        return event_id in self.events

    @property
    def next_id(self) -> int:
        """下一个事件 ID，即累计写入的事件数"""
        return self._next_id

    def get(self, event_id: int) -> MemoryEvent:
        if event_id not in self.events:
            raise UnknownEventId(f"记忆库中不存在事件 {event_id}")
        return self.events[event_id]

    def events_in(self, ticker: str, layer: Layer) -> List[MemoryEvent]:
        return [e for e in self.events.values() if e.ticker == ticker and e.layer == layer]

    def layer_sizes(self, ticker: str) -> Dict[Layer, int]:
        sizes = {layer: 0 for layer in LAYER_ORDER}
        for event in self.events.values():
            if event.ticker == ticker:
                sizes[event.layer] += 1
        return sizes

    # ---------- 写入 ----------

    def ingest(
        self,
        text: str,
        ticker: str,
        layer: Layer,
        day: date,
        vector: np.ndarray,
        rng: UniformSource,
        source_kind: Optional[SourceKind] = None,
        source_id: Optional[str] = None,
    ) -> MemoryEvent:
        """
        写入一条记忆事件，重要性基础分按该层分布采样一次

        Args:
            text: 洞察文本
            ticker: 股票代码
            layer: 目标层
            day: 创建日期（即锚定日期）
            vector: 文本向量
            rng: 重要性采样子流
            source_kind: 来源类型（默认按层推断）
            source_id: 来源文档 ID

        Returns:
            新建的 MemoryEvent
        """
        if not text or not text.strip():
            raise EmptyText("记忆事件文本不能为空")
        vector = np.asarray(vector, dtype=np.float64)
        if self._dimension is None:
            self._dimension = vector.shape[0]
        elif vector.shape != (self._dimension,):
            raise DimensionMismatch(f"向量维度 {vector.shape} 与记忆库维度 {self._dimension} 不一致")

        params = self.layer_params[layer]
        importance = sample_categorical(rng, IMPORTANCE_VALUES, params.importance_probs)

        event = MemoryEvent(
            id=self._next_id,
            ticker=ticker,
            layer=layer,
            text=text,
            vector=vector.tolist(),
            anchor_date=day,
            created_date=day,
            importance_value=importance,
            source_kind=source_kind or _DEFAULT_SOURCE[layer],
            source_id=source_id,
        )
        self._next_id += 1
        self._insert(event)
        log.debug(f"写入记忆: id={event.id}, layer={layer.value}, v={importance}, date={day}")
        return event

    def _insert(self, event: MemoryEvent) -> None:
        self.events[event.id] = event
        self.index.add(event.id, np.asarray(event.vector, dtype=np.float64))

    # ---------- 打分 ----------

    def recency_score(self, event: MemoryEvent, query_date: date) -> float:
        return recency_score(event, query_date, self.layer_params[event.layer])

    def relevancy_score(self, event: MemoryEvent, query_vector: np.ndarray) -> float:
        return relevancy_score(event, query_vector)

    def importance_score_raw(self, event: MemoryEvent, query_date: date) -> float:
        return importance_score_raw(event, query_date, self.layer_params[event.layer])

    def retrieval_score(self, event: MemoryEvent, query_vector: np.ndarray, query_date: date) -> ScoredEvent:
        return retrieval_score(event, query_vector, query_date, self.layer_params[event.layer])

    # ---------- 检索 ----------

    def retrieve_top_k(
        self,
        ticker: str,
        query_vector: np.ndarray,
        query_date: date,
        k: int,
    ) -> RetrievedMemories:
        """
        每层独立取 γ 最高的 k 个事件

        排序：γ 降序，γ 相同时 ID 大（更新）者在前

        Args:
            ticker: 股票代码
            query_vector: 查询向量
            query_date: 查询日期
            k: 每层返回数量

        Returns:
            层 -> [(事件, 打分)]
        """
        if k < 1:
            raise ValueError(f"k 至少为 1: {k}")
        result: RetrievedMemories = {}
        for layer in LAYER_ORDER:
            candidates = self.events_in(ticker, layer)
            sims = self.index.similarities((e.id for e in candidates), query_vector)
            params = self.layer_params[layer]
            scored = [
                (event, retrieval_score(event, query_vector, query_date, params, max(0.0, sims[event.id])))
                for event in candidates
            ]
            scored.sort(key=lambda pair: (-pair[1].gamma, -pair[0].id))
            result[layer] = scored[:k]
        return result

    # ---------- 衰减清理 ----------

    def decay_and_purge(self, query_date: date) -> List[int]:
        """
        清理时近性 < 0.05 或未缩放重要性 < 5 的事件

        Returns:
            被清理的事件 ID（升序）
        """
        purged = []
        for event in list(self.events.values()):
            if event.anchor_date > query_date:
                continue
            if (
                self.recency_score(event, query_date) < RECENCY_PURGE_THRESHOLD
                or self.importance_score_raw(event, query_date) < IMPORTANCE_PURGE_THRESHOLD
            ):
                purged.append(event.id)
        for event_id in purged:
            del self.events[event_id]
            self.index.remove(event_id)
        if purged:
            log.debug(f"{query_date} 清理记忆 {len(purged)} 条")
        return sorted(purged)

    # ---------- 引用与晋级 ----------

    def register_access(self, cited_event_ids: Iterable[int], query_date: date) -> List[int]:
        """
        记录引用：每次 +5 重要性；累计达到阈值时晋级到更深一层并重置锚定日期

        Args:
            cited_event_ids: 被引用的事件 ID（同一次调用内去重）
            query_date: 引用日期

        Returns:
            晋级的事件 ID
        """
        ids = list(dict.fromkeys(cited_event_ids))
        unknown = [i for i in ids if i not in self.events]
        if unknown:
            raise UnknownEventId(f"记忆库中不存在事件 {unknown}")

        promoted = []
        for event_id in ids:
            event = self.events[event_id]
            event.access_count += 1
            event.total_access_count += 1
            event.access_bonus += ACCESS_BONUS_POINTS
            deeper = event.layer.deeper()
            if deeper is not None and event.access_count >= self.promotion_threshold:
                event.layer = deeper
                event.anchor_date = query_date
                event.access_count = 0
                promoted.append(event_id)
                log.debug(f"{query_date} 记忆 {event_id} 晋级到 {deeper.value}")
        return promoted

    # ---------- 快照 ----------

    def to_jsonl(self) -> str:
        """按 ID 升序，每行一个事件"""
        lines = [
            json.dumps(self.events[i].model_dump(mode="json"), sort_keys=True, ensure_ascii=False)
            for i in sorted(self.events)
        ]
        return "".join(line + "\n" for line in lines)

    def meta_json(self) -> str:
        """快照元数据：下一个事件 ID（被清除的最新事件不会出现在事件行中）"""
        return json.dumps({"next_id": self._next_id}, sort_keys=True) + "\n"

    def save_snapshot(self, path: Path) -> Path:
        """写出事件快照，并在旁边写出 {stem}.meta.json"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        snapshot_meta_path(path).write_text(self.meta_json(), encoding="utf-8")
        return path

    @classmethod
    def load_snapshot(
        cls,
        path: Path,
        layer_params: Dict[Layer, LayerParams],
        promotion_threshold: int = 3,
    ) -> "LayeredMemory":
        """从 JSONL 快照恢复记忆库"""
        memory = cls(layer_params, promotion_threshold)
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                event = MemoryEvent.model_validate(json.loads(line))
                if memory._dimension is None:
                    memory._dimension = len(event.vector)
                memory._insert(event)
        next_id = max(memory.events, default=-1) + 1
        meta_path = snapshot_meta_path(path)
        if meta_path.exists():
            next_id = max(next_id, int(json.loads(meta_path.read_text(encoding="utf-8"))["next_id"]))
        memory._next_id = next_id
        return memory
