"""
LLM 网关与 Mock 提供商测试
"""
import json
import random
from types import SimpleNamespace
from unittest.mock import AsyncMock

import pytest

from app.config import settings
from app.exceptions import MalformedRulebook, ProviderUnavailable, ValidationExhausted
from app.models.schemas import (
    DecisionReflectionPayload,
    Layer,
    PromptRequest,
    ProviderKind,
    SummaryPayload,
    TemplateId,
    TrainingReflectionPayload,
)
from app.services.llm_factory import LLMFactory, MockLLMProvider, RemoteLLMProvider, load_rulebook
from app.services.llm_gateway import (
    PAYLOAD_MODELS,
    RETRY_SUFFIX,
    TEMPLATES_DIR,
    LLMGateway,
    PromptTemplate,
    load_risk_paragraph,
    strip_code_fence,
)
from tests.conftest import RULEBOOK_PATH, ScriptedProvider

POSITIVE_NEWS = "SYN shares surge as strong quarterly demand beats expectations."
NEGATIVE_NEWS = "SYN shares plunge as weak demand misses expectations."


def reflect_request(shallow=(), intermediate=(), deep=(), trailing="0.0", risk="Seeking", train_label=None):
    """构建即时反思请求；记忆为 (id, 文本) 列表"""
    def block(items):
        return "\n".join(f"[id={i}] {text}" for i, text in items) or "(none)"

    slots = {
        "character": "You are a trader.",
        "effective_risk": risk,
        "date": "2022-02-14",
        "ticker": "SYN",
        "shallow_memories": block(shallow),
        "intermediate_memories": block(intermediate),
        "deep_memories": block(deep),
    }
    if train_label is None:
        template = TemplateId.IMMEDIATE_REFLECT_TEST
        slots.update(window_m="5", trailing_return=trailing)
    else:
        template = TemplateId.IMMEDIATE_REFLECT_TRAIN
        slots["train_label"] = train_label
    offered = {
        Layer.SHALLOW: [i for i, _ in shallow],
        Layer.INTERMEDIATE: [i for i, _ in intermediate],
        Layer.DEEP: [i for i, _ in deep],
    }
    return PromptRequest(template_id=template, slots=slots, offered_ids=offered)


def decision_json(direction="Buy", shallow=(), intermediate=(), deep=(), rationale="ok"):
    return json.dumps({
        "direction": direction,
        "rationale": rationale,
        "cited_ids": {"shallow": list(shallow), "intermediate": list(intermediate), "deep": list(deep)},
    })


class TestPromptTemplates:
    """Prompt 模板测试"""

    def test_every_template_registered(self):
        """测试 1: 每个模板 ID 都有模板文件且标注为近似措辞"""
        for template_id in TemplateId:
            path = TEMPLATES_DIR / f"{template_id.value}.txt"
            first_line = path.read_text(encoding="utf-8").splitlines()[0]
            assert first_line.startswith("#")
            assert "approximate" in first_line
            assert template_id in PAYLOAD_MODELS

    def test_required_slots(self, gateway):
        """测试 2: 槽位集合"""
        assert gateway.templates[TemplateId.SUMMARIZE].required_slots == {"ticker", "kind", "date", "document"}
        assert gateway.templates[TemplateId.IMMEDIATE_REFLECT_TEST].required_slots == {
            "character", "effective_risk", "date", "ticker", "window_m", "trailing_return",
            "shallow_memories", "intermediate_memories", "deep_memories",
        }
        assert "train_label" in gateway.templates[TemplateId.IMMEDIATE_REFLECT_TRAIN].required_slots

    def test_render_missing_slot(self):
        """测试 3: 缺少槽位时报错"""
        template = PromptTemplate(TemplateId.SUMMARIZE, "# comment\nHello {{ticker}} {{date}}", SummaryPayload)
        assert template.render({"ticker": "SYN", "date": "2022-01-03"}) == "Hello SYN 2022-01-03"
        with pytest.raises(ValueError):
            template.render({"ticker": "SYN"})

    def test_messages_embed_schema(self, gateway):
        """测试 4: 用户消息包含渲染后的模板与 JSON schema"""
        messages = gateway.build_messages(reflect_request())
        assert [m["role"] for m in messages] == ["system", "user"]
        assert "{{" not in messages[1]["content"]
        assert '"direction"' in messages[1]["content"]

    def test_risk_paragraphs(self):
        """测试 5: 风险偏好段落不含注释行"""
        seeking = load_risk_paragraph("risk_seeking")
        averse = load_risk_paragraph("risk_averse")
        assert seeking.startswith("You are a risk-seeking trader.")
        assert averse.startswith("You are a risk-averse trader.")

    def test_strip_code_fence(self):
        """测试 6: 去掉 Markdown 代码块"""
        assert strip_code_fence('```json\n{"a": 1}\n```') == '{"a": 1}'
        assert strip_code_fence('  {"a": 1} ') == '{"a": 1}'


class TestMockProvider:
    """Mock 提供商测试"""

    @pytest.mark.asyncio
    async def test_summarize_deterministic(self, gateway):
        """测试 1: 相同输入两次调用得到相同输出"""
        request = PromptRequest(
            template_id=TemplateId.SUMMARIZE,
            slots={
                "ticker": "SYN",
                "kind": "news",
                "date": "2022-01-03",
                "document": f"{POSITIVE_NEWS} Trading volume was in line. Third sentence here.",
            },
        )
        first = await gateway.complete(request)
        second = await gateway.complete(request)

        assert first.raw_text == second.raw_text
        assert first.attempts == 1
        assert first.payload.sentiment == "positive"
        assert first.payload.summary == f"{POSITIVE_NEWS} Trading volume was in line. [sentiment: positive]"

    @pytest.mark.asyncio
    async def test_positive_memories_buy(self, gateway):
        """测试 2: 正面记忆得到 Buy，并引用每层排名第一的记忆"""
        request = reflect_request(
            shallow=[(4, POSITIVE_NEWS), (2, "Record growth.")],
            intermediate=[(7, "Quarterly revenue shows growth.")],
        )
        response = await gateway.complete(request)

        assert isinstance(response.payload, DecisionReflectionPayload)
        assert response.payload.direction == "Buy"
        assert response.payload.cited_ids.shallow == [4]
        assert response.payload.cited_ids.intermediate == [7]
        assert response.payload.cited_ids.deep == []

    @pytest.mark.asyncio
    async def test_negative_memories_sell(self, gateway):
        """测试 3: 负面记忆得到 Sell"""
        response = await gateway.complete(reflect_request(shallow=[(1, NEGATIVE_NEWS)]))
        assert response.payload.direction == "Sell"

    @pytest.mark.asyncio
    async def test_empty_memories_zero_return_hold(self, gateway):
        """测试 4: 无记忆且回看收益为 0 时 Hold"""
        response = await gateway.complete(reflect_request(trailing="0.0"))
        assert response.payload.direction == "Hold"
        assert response.payload.cited_ids.all_ids() == []

    @pytest.mark.asyncio
    async def test_zero_score_follows_trailing_return(self, gateway):
        """测试 5: 情感得分为 0 时跟随回看收益符号"""
        down = await gateway.complete(reflect_request(trailing="-0.03"))
        up = await gateway.complete(reflect_request(trailing="0.02"))
        assert down.payload.direction == "Sell"
        assert up.payload.direction == "Buy"

    @pytest.mark.asyncio
    async def test_averse_threshold(self, gateway):
        """测试 6: 得分 1 在 Seeking 下 Buy，在 Averse 下 Hold"""
        memories = [(3, "Analysts upgrade the stock.")]
        seeking = await gateway.complete(reflect_request(shallow=memories, risk="Seeking"))
        averse = await gateway.complete(reflect_request(shallow=memories, risk="Averse"))
        assert seeking.payload.direction == "Buy"
        assert averse.payload.direction == "Hold"

    @pytest.mark.asyncio
    async def test_training_payload_has_no_direction(self, gateway):
        """测试 7: 训练阶段输出不含交易方向"""
        response = await gateway.complete(reflect_request(shallow=[(1, POSITIVE_NEWS)], train_label="Buy"))
        assert isinstance(response.payload, TrainingReflectionPayload)
        assert "direction" not in json.loads(response.raw_text)

    @pytest.mark.asyncio
    async def test_extended_summary(self, gateway):
        """测试 8: 扩展反思统计各方向次数"""
        request = PromptRequest(
            template_id=TemplateId.EXTENDED_REFLECT,
            slots={
                "character": "c", "ticker": "SYN", "date": "2022-02-18", "window_m": "3",
                "window_dates": "2022-02-16, 2022-02-17, 2022-02-18",
                "directions": "Buy, Sell, Buy", "reflections": "r", "window_return": "0.01",
            },
        )
        response = await gateway.complete(request)
        assert "Buy x2, Sell x1, Hold x0" in response.payload.trend_summary
        assert "1.0000 percent" in response.payload.trend_summary

    @pytest.mark.asyncio
    async def test_cited_ids_subset_of_offered(self, gateway):
        """测试 9: 随机记忆块上引用 ID 总是提供过的 ID"""
        rnd = random.Random(9)
        texts = [POSITIVE_NEWS, NEGATIVE_NEWS, "Neutral update.", "Record gains and a strong rally."]
        for _ in range(100):
            ids = rnd.sample(range(1000), 9)
            layers = [
                [(i, rnd.choice(texts)) for i in ids[j * 3: j * 3 + rnd.randint(0, 3)]]
                for j in range(3)
            ]
            request = reflect_request(*layers, trailing=str(rnd.uniform(-0.05, 0.05)))
            response = await gateway.complete(request)
            for layer, cited in response.payload.cited_ids.as_dict().items():
                assert set(cited) <= set(request.offered_ids[layer])

    @pytest.mark.asyncio
    async def test_request_required(self, mock_provider):
        """测试 10: Mock 提供商需要结构化请求"""
        with pytest.raises(ProviderUnavailable):
            await mock_provider.chat_completion([{"role": "user", "content": "hi"}])


class TestRulebook:
    """规则文件测试"""

    def test_load_default(self):
        """测试 1: 默认规则文件"""
        rulebook = load_rulebook(RULEBOOK_PATH)
        assert "surge" in rulebook.positive_terms
        assert rulebook.risk_thresholds == {"Seeking": 1, "Averse": 2}

    def test_empty_terms(self, tmp_path):
        """测试 2: 词表为空"""
        path = tmp_path / "rules.json"
        path.write_text(json.dumps({"positive_terms": [], "negative_terms": ["bad"]}), encoding="utf-8")
        with pytest.raises(MalformedRulebook):
            load_rulebook(path)

    def test_invalid_json(self, tmp_path):
        """测试 3: 非法 JSON"""
        path = tmp_path / "rules.json"
        path.write_text("{oops", encoding="utf-8")
        with pytest.raises(MalformedRulebook):
            load_rulebook(path)

    def test_unknown_tie_rule(self, tmp_path):
        """测试 4: 未知的平局规则"""
        path = tmp_path / "rules.json"
        path.write_text(json.dumps({
            "positive_terms": ["good"], "negative_terms": ["bad"],
            "tie_rules": {"zero_score": "coin_flip"},
        }), encoding="utf-8")
        with pytest.raises(MalformedRulebook):
            load_rulebook(path)

    def test_factory_requires_rulebook(self, tmp_path):
        """测试 5: Mock 模式缺少或找不到规则文件"""
        with pytest.raises(MalformedRulebook):
            LLMFactory.create(ProviderKind.MOCK)
        with pytest.raises(MalformedRulebook):
            LLMFactory.create(ProviderKind.MOCK, tmp_path / "missing.json")

    def test_tie_rule_hold(self, tmp_path):
        """测试 6: zero_score=Hold 时得分为 0 直接 Hold"""
        data = json.loads(RULEBOOK_PATH.read_text(encoding="utf-8"))
        data["tie_rules"]["zero_score"] = "Hold"
        path = tmp_path / "rules.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        provider = MockLLMProvider.from_file(path)
        assert provider._direction(0, 1, "0.05") == "Hold"


class TestValidationRetry:
    """结构化输出校验与重试测试"""

    @pytest.mark.asyncio
    async def test_invalid_direction_then_valid(self):
        """测试 1: 方向为 Short 时重试一次后成功"""
        provider = ScriptedProvider([decision_json("Short"), decision_json("Hold")])
        gateway = LLMGateway(provider, max_retries=2)
        response = await gateway.complete(reflect_request())

        assert response.attempts == 2
        assert response.payload.direction == "Hold"
        retry_messages = provider.calls[1]
        assert retry_messages[2] == {"role": "assistant", "content": decision_json("Short")}
        assert retry_messages[3]["role"] == "user"
        assert retry_messages[3]["content"].endswith(RETRY_SUFFIX)

    @pytest.mark.asyncio
    async def test_repeated_invalid_exhausts(self):
        """测试 2: 持续输出 Short 时抛出 ValidationExhausted"""
        provider = ScriptedProvider([decision_json("Short")])
        gateway = LLMGateway(provider, max_retries=2)
        with pytest.raises(ValidationExhausted) as exc_info:
            await gateway.complete(reflect_request())

        assert exc_info.value.attempts == 3
        assert exc_info.value.template_id == TemplateId.IMMEDIATE_REFLECT_TEST.value
        assert len(provider.calls) == 3
        assert exc_info.value.exit_code == 4

    @pytest.mark.asyncio
    async def test_cited_id_not_offered(self):
        """测试 3: 引用未提供的 ID 触发重试"""
        provider = ScriptedProvider([decision_json("Buy", shallow=[99]), decision_json("Buy", shallow=[1])])
        gateway = LLMGateway(provider, max_retries=1)
        response = await gateway.complete(reflect_request(shallow=[(1, POSITIVE_NEWS)]))

        assert response.attempts == 2
        assert response.payload.cited_ids.shallow == [1]
        assert "99" in provider.calls[1][3]["content"]

    @pytest.mark.asyncio
    async def test_code_fenced_output_accepted(self):
        """测试 4: 代码块包裹的 JSON 可以解析"""
        provider = ScriptedProvider([f"```json\n{decision_json('Sell')}\n```"])
        response = await LLMGateway(provider).complete(reflect_request())
        assert response.payload.direction == "Sell"

    @pytest.mark.asyncio
    async def test_fuzzed_outputs_never_leak(self):
        """测试 5: 1000 个随机输出要么通过完整校验，要么抛出 ValidationExhausted"""
        rnd = random.Random(1234)
        request = reflect_request(
            shallow=[(1, POSITIVE_NEWS), (2, NEGATIVE_NEWS)],
            intermediate=[(5, "Quarterly growth.")],
        )
        directions = ["Buy", "Sell", "Hold", "Buy", "Sell", "Hold", "Short", "buy", "", None, 1]

        def fuzz() -> str:
            payload = {
                "direction": rnd.choice(directions),
                "rationale": rnd.choice(["because", "because", "", None]),
                "cited_ids": {
                    key: [rnd.choice([1, 2, 5, 9]) for _ in range(rnd.randint(0, 1))]
                    for key in ("shallow", "intermediate", "deep")
                    if rnd.random() < 0.9
                },
            }
            for key in list(payload):
                if rnd.random() < 0.1:
                    del payload[key]
            if rnd.random() < 0.1:
                payload["extra"] = "field"
            text = json.dumps(payload)
            mode = rnd.random()
            if mode < 0.1:
                return text[: rnd.randint(0, len(text))]
            if mode < 0.2:
                return f"```json\n{text}\n```"
            if mode < 0.25:
                return "I think you should buy."
            return text

        passed = failed = 0
        for _ in range(1000):
            gateway = LLMGateway(ScriptedProvider([fuzz()]), max_retries=0)
            try:
                response = await gateway.complete(request)
            except ValidationExhausted:
                failed += 1
                continue
            passed += 1
            payload = response.payload
            assert isinstance(payload, DecisionReflectionPayload)
            assert payload.direction in ("Buy", "Sell", "Hold")
            assert payload.rationale
            for layer, cited in payload.cited_ids.as_dict().items():
                assert set(cited) <= set(request.offered_ids[layer])

        assert passed > 0 and failed > 0


class TestRemoteProvider:
    """远程 LLM 提供商测试"""

    def test_missing_key(self, monkeypatch):
        """测试 1: 未配置 API Key"""
        monkeypatch.setattr(settings, "llm_api_key", None)
        with pytest.raises(ProviderUnavailable):
            LLMFactory.create(ProviderKind.REMOTE)

    @pytest.mark.asyncio
    async def test_completion(self):
        """测试 2: 返回消息内容"""
        provider = RemoteLLMProvider(api_key="test-key", model="test-model")
        message = SimpleNamespace(content=decision_json("Hold"))
        create = AsyncMock(return_value=SimpleNamespace(choices=[SimpleNamespace(message=message)]))
        provider.client.chat.completions.create = create

        response = await LLMGateway(provider).complete(reflect_request())
        assert response.payload.direction == "Hold"
        assert create.await_args.kwargs["model"] == "test-model"
        assert create.await_args.kwargs["temperature"] == 0.7
