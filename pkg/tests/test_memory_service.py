"""
分层记忆服务测试
打分闭式解、检索穷举对照、清理与晋级的生命周期性质、快照
"""
import math
import random
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from app.config import default_layer_params
from app.exceptions import DimensionMismatch, EmptyText, FutureEvent, UnknownEventId
from app.models.schemas import IMPORTANCE_VALUES, LAYER_ORDER, Layer, MemoryEvent, SourceKind
from app.services.memory_service import (
    LayeredMemory,
    importance_score_raw,
    recency_score,
    relevancy_score,
    retrieval_score,
)
from app.utils.rng import RngStreams
from tests.conftest import FixedUniform

PARAMS = default_layer_params()
D0 = date(2022, 1, 3)
E0 = np.array([1.0, 0.0])


def uniform_for(layer: Layer, value: int) -> FixedUniform:
    """让逆 CDF 采样恰好落在 value 上的随机源"""
    cumulative = 0.0
    for v, p in zip(IMPORTANCE_VALUES, PARAMS[layer].importance_probs):
        if v == value:
            return FixedUniform(cumulative + p / 2)
        cumulative += p
    raise ValueError(value)


def make_event(layer=Layer.SHALLOW, anchor=D0, value=40, bonus=0, vector=(1.0, 0.0), event_id=0):
    return MemoryEvent(
        id=event_id,
        ticker="SYN",
        layer=layer,
        text="event",
        vector=list(vector),
        anchor_date=anchor,
        created_date=anchor,
        importance_value=value,
        access_bonus=bonus,
        source_kind=SourceKind.NEWS,
    )


def put(memory, layer=Layer.SHALLOW, day=D0, value=40, vector=E0, ticker="SYN"):
    return memory.ingest("insight text", ticker, layer, day, vector, uniform_for(layer, value))


class TestScoring:
    """打分函数测试"""

    def test_recency_examples(self):
        """测试 1: δ=0 为 1，δ=Q 为 e^-1"""
        shallow = make_event()
        deep = make_event(layer=Layer.DEEP)
        assert recency_score(shallow, D0, PARAMS[Layer.SHALLOW]) == 1.0
        assert recency_score(shallow, D0 + timedelta(days=14), PARAMS[Layer.SHALLOW]) == pytest.approx(
            0.367879, abs=1e-6
        )
        assert recency_score(deep, D0 + timedelta(days=365), PARAMS[Layer.DEEP]) == pytest.approx(
            math.exp(-1), rel=1e-12
        )

    def test_recency_future_event(self):
        """测试 2: 查询日期早于锚定日期"""
        with pytest.raises(FutureEvent):
            recency_score(make_event(), D0 - timedelta(days=1), PARAMS[Layer.SHALLOW])

    def test_relevancy_examples(self):
        """测试 3: 相同向量为 1，正交为 0，负相关截断为 0"""
        event = make_event()
        assert relevancy_score(event, E0) == pytest.approx(1.0)
        assert relevancy_score(event, np.array([0.0, 1.0])) == 0.0
        negative = np.array([-0.3, math.sqrt(1 - 0.09)])
        assert float(np.dot(E0, negative)) == pytest.approx(-0.3)
        assert relevancy_score(event, negative) == 0.0

    def test_relevancy_dimension_mismatch(self):
        """测试 4: 维度不一致"""
        with pytest.raises(DimensionMismatch):
            relevancy_score(make_event(), np.ones(3))

    def test_importance_examples(self):
        """测试 5: 重要性原始分"""
        shallow = PARAMS[Layer.SHALLOW]
        assert importance_score_raw(make_event(value=80), D0, shallow) == 80.0
        assert importance_score_raw(make_event(value=40), D0 + timedelta(days=7), shallow) == pytest.approx(
            19.1319, abs=1e-4
        )
        assert importance_score_raw(make_event(value=60, bonus=5), D0, shallow) == 65.0

    def test_gamma_examples(self):
        """测试 6: γ 为三个缩放子分数之和"""
        maximal = retrieval_score(make_event(value=80, bonus=20), E0, D0, PARAMS[Layer.SHALLOW])
        assert maximal.gamma == pytest.approx(3.0)

        scored = retrieval_score(
            make_event(value=40), np.array([0.0, 1.0]), D0 + timedelta(days=14), PARAMS[Layer.SHALLOW]
        )
        # δ=14 时重要性为 40 × 0.9^14；单独验证 e^-1 + 0 + 0.191319 的组合
        assert scored.gamma == scored.recency_score + scored.relevancy_score + scored.importance_score

        composed = math.exp(-1) + 0.0 + min(1.0, 40 * 0.9 ** 7 / 100)
        assert composed == pytest.approx(0.559198, abs=1e-6)

    def test_gamma_vanishes_far_in_future(self):
        """测试 7: δ 很大时 γ 趋近 0"""
        scored = retrieval_score(
            make_event(), np.array([0.0, 1.0]), D0 + timedelta(days=5000), PARAMS[Layer.SHALLOW]
        )
        assert scored.gamma < 1e-6

    def test_closed_forms_on_random_triples(self):
        """测试 8: 1000 组随机 (层, δ, v) 与闭式解一致"""
        rnd = random.Random(2024)
        for _ in range(1000):
            layer = rnd.choice(LAYER_ORDER)
            delta = rnd.randint(0, 400)
            value = rnd.choice(IMPORTANCE_VALUES)
            bonus = 5 * rnd.randint(0, 4)
            params = PARAMS[layer]
            event = make_event(layer=layer, value=value, bonus=bonus)
            day = D0 + timedelta(days=delta)

            assert recency_score(event, day, params) == pytest.approx(
                math.exp(-delta / params.q_stability), rel=1e-12
            )
            assert importance_score_raw(event, day, params) == pytest.approx(
                (value + bonus) * math.pow(params.alpha, delta), rel=1e-12, abs=1e-300
            )

    @hyp_settings(max_examples=300, deadline=None)
    @given(
        st.sampled_from(LAYER_ORDER),
        st.sampled_from(IMPORTANCE_VALUES),
        st.integers(min_value=0, max_value=3000),
        st.integers(min_value=1, max_value=500),
    )
    def test_monotone_decay(self, layer, value, delta, step):
        """测试 9: 时近性与重要性随时间严格递减"""
        params = PARAMS[layer]
        event = make_event(layer=layer, value=value)
        early = D0 + timedelta(days=delta)
        late = early + timedelta(days=step)
        assert recency_score(event, late, params) < recency_score(event, early, params)
        assert importance_score_raw(event, late, params) < importance_score_raw(event, early, params)

    @hyp_settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=0, max_value=2000), st.sampled_from(IMPORTANCE_VALUES))
    def test_layer_ordering(self, delta, value):
        """测试 10: 相同 δ 下越深的层衰减越慢"""
        day = D0 + timedelta(days=delta)
        recency = [recency_score(make_event(layer=l), day, PARAMS[l]) for l in LAYER_ORDER]
        importance = [importance_score_raw(make_event(layer=l, value=value), day, PARAMS[l]) for l in LAYER_ORDER]
        assert recency[0] <= recency[1] <= recency[2]
        assert importance[0] <= importance[1] <= importance[2]


class TestIngest:
    """写入测试"""

    def test_deep_ingest_upper_branch(self, memory):
        """测试 1: 均匀数落在第三个分支时深层重要性为 80"""
        event = memory.ingest("annual report", "SYN", Layer.DEEP, D0, E0, FixedUniform(0.9))
        assert event.importance_value == 80
        assert event.layer == Layer.DEEP
        assert event.source_kind == SourceKind.FILING_10K

    def test_shallow_frequency(self, memory):
        """测试 2: 10000 次浅层写入中 40 分的频率约为 0.8"""
        rng = RngStreams(42).stream("importance")
        values = [memory.ingest("news", "SYN", Layer.SHALLOW, D0, E0, rng).importance_value for _ in range(10_000)]
        assert values.count(40) / len(values) == pytest.approx(0.8, abs=0.02)

    def test_empty_text(self, memory):
        """测试 3: 空文本"""
        with pytest.raises(EmptyText):
            memory.ingest("", "SYN", Layer.SHALLOW, D0, E0, FixedUniform(0.1))
        assert len(memory) == 0

    def test_dimension_mismatch(self, memory):
        """测试 4: 维度与已有事件不一致"""
        put(memory)
        with pytest.raises(DimensionMismatch):
            memory.ingest("text", "SYN", Layer.SHALLOW, D0, np.ones(3), FixedUniform(0.1))

    def test_ids_monotonic(self, memory):
        """测试 5: ID 单调递增"""
        ids = [put(memory).id for _ in range(5)]
        assert ids == [0, 1, 2, 3, 4]
        assert memory.next_id == 5

    def test_same_seed_same_store(self, layer_params):
        """测试 6: 相同种子得到逐位相同的记忆库"""
        def build():
            memory = LayeredMemory(layer_params)
            rng = RngStreams(7).stream("importance")
            for i in range(50):
                memory.ingest(f"event {i}", "SYN", LAYER_ORDER[i % 3], D0 + timedelta(days=i), E0, rng)
            return memory.to_jsonl()

        assert build() == build()


class TestRetrieval:
    """检索测试"""

    def test_under_full_layer(self, memory):
        """测试 1: 层内事件少于 k 时全部返回"""
        put(memory, value=40)
        put(memory, value=80)
        result = memory.retrieve_top_k("SYN", E0, D0, 5)
        assert [e.id for e, _ in result[Layer.SHALLOW]] == [1, 0]
        assert result[Layer.INTERMEDIATE] == []
        assert result[Layer.DEEP] == []

    def test_tie_newer_first(self, memory):
        """测试 2: γ 相同时 ID 大者在前"""
        put(memory, value=60)
        put(memory, value=60)
        result = memory.retrieve_top_k("SYN", E0, D0, 2)[Layer.SHALLOW]
        assert result[0][1].gamma == result[1][1].gamma
        assert [e.id for e, _ in result] == [1, 0]

    def test_top_three_of_ten(self, memory):
        """测试 3: 10 个不同 γ 的事件取前 3"""
        for i in range(10):
            put(memory, day=D0 + timedelta(days=i))
        query_date = D0 + timedelta(days=9)
        result = memory.retrieve_top_k("SYN", E0, query_date, 3)[Layer.SHALLOW]
        assert [e.id for e, _ in result] == [9, 8, 7]

    def test_other_ticker_excluded(self, memory):
        """测试 4: 只检索同一股票的事件"""
        put(memory, ticker="AAA")
        put(memory, ticker="SYN")
        result = memory.retrieve_top_k("SYN", E0, D0, 5)
        assert [e.ticker for e, _ in result[Layer.SHALLOW]] == ["SYN"]

    def test_invalid_k(self, memory):
        """测试 5: k < 1"""
        with pytest.raises(ValueError):
            memory.retrieve_top_k("SYN", E0, D0, 0)

    def test_matches_exhaustive_oracle(self, layer_params):
        """测试 6: 200 个随机记忆库上与穷举排序结果完全一致（含并列顺序）"""
        rnd = random.Random(11)
        components = [-1.0, 0.0, 1.0, 2.0]
        query_date = D0 + timedelta(days=60)
        for _ in range(200):
            memory = LayeredMemory(layer_params)
            for _ in range(rnd.randint(0, 200)):
                layer = rnd.choice(LAYER_ORDER)
                vector = np.array([rnd.choice(components) for _ in range(4)])
                day = query_date - timedelta(days=rnd.randint(0, 60))
                event = memory.ingest(
                    "text", "SYN", layer, day, vector, uniform_for(layer, rnd.choice(IMPORTANCE_VALUES))
                )
                event.access_bonus = 5 * rnd.randint(0, 2)
            query = np.array([rnd.choice(components) for _ in range(4)])
            k = rnd.randint(1, 12)

            result = memory.retrieve_top_k("SYN", query, query_date, k)
            for layer in LAYER_ORDER:
                scored = [
                    (event.id, retrieval_score(event, query, query_date, layer_params[layer]).gamma)
                    for event in memory.events.values()
                    if event.layer == layer
                ]
                scored.sort(key=lambda pair: (-pair[1], -pair[0]))
                expected = scored[:k]
                actual = [(event.id, s.gamma) for event, s in result[layer]]
                assert actual == expected


class TestDecayAndPurge:
    """衰减清理测试"""

    def test_recency_boundary(self, memory):
        """测试 1: 浅层 δ=42 时时近性低于 0.05 被清理，δ=41 保留"""
        a = put(memory)
        a.access_bonus = 400  # 让重要性不触发清理
        assert memory.decay_and_purge(D0 + timedelta(days=41)) == []
        assert memory.decay_and_purge(D0 + timedelta(days=42)) == [a.id]

    def test_importance_boundary(self, memory):
        """测试 2: 浅层 v=40 在 δ=20 时重要性低于 5 被清理，δ=19 保留"""
        a = put(memory, value=40)
        day19 = D0 + timedelta(days=19)
        day20 = D0 + timedelta(days=20)
        assert memory.recency_score(a, day20) == pytest.approx(0.2397, abs=1e-4)
        assert memory.decay_and_purge(day19) == []
        assert memory.decay_and_purge(day20) == [a.id]
        assert a.id not in memory

    def test_deep_retained(self, memory):
        """测试 3: 深层 v=80 在 δ=100 时保留"""
        a = put(memory, layer=Layer.DEEP, value=80)
        day = D0 + timedelta(days=100)
        assert memory.importance_score_raw(a, day) == pytest.approx(23.92, abs=0.01)
        assert memory.decay_and_purge(day) == []

    def test_future_events_untouched(self, memory):
        """测试 4: 锚定日期晚于查询日期的事件不参与清理"""
        put(memory, day=D0 + timedelta(days=30))
        assert memory.decay_and_purge(D0) == []
        assert len(memory) == 1


class TestRegisterAccess:
    """引用与晋级测试"""

    def test_promotion_on_third_citation(self, memory):
        """测试 1: 第三次引用时晋级到中层并重置时近性"""
        event = put(memory)
        assert memory.register_access([event.id], D0 + timedelta(days=1)) == []
        assert memory.register_access([event.id], D0 + timedelta(days=2)) == []
        third = D0 + timedelta(days=3)
        assert memory.register_access([event.id], third) == [event.id]

        assert event.layer == Layer.INTERMEDIATE
        assert event.anchor_date == third
        assert memory.recency_score(event, third) == 1.0
        assert event.access_count == 0
        assert event.access_bonus == 15
        assert event.created_date == D0

    def test_deep_ceiling(self, memory):
        """测试 2: 深层事件只加分不晋级"""
        event = put(memory, layer=Layer.DEEP)
        for i in range(5):
            assert memory.register_access([event.id], D0 + timedelta(days=i)) == []
        assert event.layer == Layer.DEEP
        assert event.access_bonus == 25
        assert event.anchor_date == D0

    def test_duplicate_ids_counted_once(self, memory):
        """测试 3: 同一次调用内重复 ID 只计一次"""
        event = put(memory)
        memory.register_access([event.id, event.id, event.id], D0)
        assert event.access_count == 1
        assert event.layer == Layer.SHALLOW

    def test_unknown_id_no_mutation(self, memory):
        """测试 4: 未知 ID 抛错且不修改任何事件"""
        event = put(memory)
        with pytest.raises(UnknownEventId):
            memory.register_access([event.id, 999], D0)
        assert event.access_count == 0
        assert event.access_bonus == 0

    def test_random_lifecycles(self, layer_params):
        """测试 5: 500 段随机历史上的清理与晋级性质"""
        rnd = random.Random(5)
        for _ in range(500):
            memory = LayeredMemory(layer_params, promotion_threshold=3)
            day = D0
            for _ in range(20):
                day += timedelta(days=rnd.randint(1, 6))
                for _ in range(rnd.randint(0, 3)):
                    layer = rnd.choice(LAYER_ORDER)
                    put(memory, layer=layer, day=day, value=rnd.choice(IMPORTANCE_VALUES))

                ids = list(memory.events)
                cited = [rnd.choice(ids) for _ in range(rnd.randint(0, 3))] if ids else []
                before = {i: memory.get(i).model_copy() for i in ids}
                promoted = memory.register_access(cited, day)

                assert len(memory) == len(before)
                unique = set(cited)
                for event_id, old in before.items():
                    new = memory.get(event_id)
                    assert new.importance_value == old.importance_value
                    assert new.access_bonus == 5 * new.total_access_count
                    if event_id not in unique:
                        assert new == old
                        continue
                    assert new.total_access_count == old.total_access_count + 1
                    if old.layer != Layer.DEEP and old.access_count + 1 == 3:
                        assert event_id in promoted
                        assert LAYER_ORDER.index(new.layer) == LAYER_ORDER.index(old.layer) + 1
                        assert new.anchor_date == day
                        assert memory.recency_score(new, day) == 1.0
                        assert new.access_count == 0
                    else:
                        assert event_id not in promoted
                        assert new.layer == old.layer
                        assert new.anchor_date == old.anchor_date
                        assert new.access_count == old.access_count + 1

                snapshot = dict(memory.events)
                purged = set(memory.decay_and_purge(day))
                for event_id, event in snapshot.items():
                    violates = (
                        memory.recency_score(event, day) < 0.05
                        or memory.importance_score_raw(event, day) < 5
                    )
                    assert violates == (event_id in purged)
                    assert (event_id in memory) == (event_id not in purged)


class TestSnapshot:
    """快照测试"""

    def test_round_trip(self, memory, layer_params, tmp_path):
        """测试 1: 保存 → 加载 → 再保存逐字节一致"""
        rng = RngStreams(3).stream("importance")
        for i in range(12):
            memory.ingest(
                f"event {i} value {i / 7}", "SYN", LAYER_ORDER[i % 3], D0 + timedelta(days=i),
                np.array([math.sin(i), math.cos(i), 1 / (i + 3)]), rng,
            )
        memory.register_access([0, 1, 3], D0 + timedelta(days=12))

        first = memory.save_snapshot(tmp_path / "a.jsonl")
        restored = LayeredMemory.load_snapshot(first, layer_params)
        second = restored.save_snapshot(tmp_path / "b.jsonl")

        assert first.read_bytes() == second.read_bytes()
        assert restored.events == memory.events
        assert restored.next_id == 12

    def test_ingest_after_restore(self, memory, layer_params, tmp_path):
        """测试 2: 恢复后新事件 ID 继续递增"""
        put(memory)
        put(memory)
        restored = LayeredMemory.load_snapshot(memory.save_snapshot(tmp_path / "m.jsonl"), layer_params)
        assert put(restored).id == 2

    def test_purged_newest_id_not_reused(self, memory, layer_params, tmp_path):
        """测试 3: 最新事件被清除后，恢复的记忆库不会复用它的 ID"""
        put(memory, layer=Layer.DEEP, value=80)
        put(memory, layer=Layer.SHALLOW, value=40)
        assert memory.decay_and_purge(D0 + timedelta(days=60)) == [1]

        path = memory.save_snapshot(tmp_path / "memory_snapshot.jsonl")
        assert (tmp_path / "memory_snapshot.meta.json").exists()
        restored = LayeredMemory.load_snapshot(path, layer_params)

        assert restored.next_id == memory.next_id == 2
        assert put(restored, day=D0 + timedelta(days=60)).id == 2

    def test_snapshot_without_meta(self, memory, layer_params, tmp_path):
        """测试 4: 缺少元数据文件时按最大事件 ID 恢复"""
        put(memory)
        path = memory.save_snapshot(tmp_path / "m.jsonl")
        (tmp_path / "m.meta.json").unlink()
        assert LayeredMemory.load_snapshot(path, layer_params).next_id == 1
