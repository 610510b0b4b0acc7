"""
LLM 工厂模式
远程 OpenAI 兼容提供商与基于规则文件的确定性 Mock 提供商共用统一接口
"""
from typing import List, Dict, Any, Optional
from abc import ABC, abstractmethod
from pathlib import Path
import asyncio
import json
import re

from openai import AsyncOpenAI, APIError
from pydantic import BaseModel, Field, ValidationError
import httpx

from app.config import settings
from app.exceptions import MalformedRulebook, ProviderUnavailable
from app.models.schemas import PromptRequest, ProviderKind, TemplateId
from app.utils.logger import log
from app.utils.async_helper import async_retry


class BaseLLMProvider(ABC):
    """LLM 提供商基类"""

    model: str

    @abstractmethod
    async def chat_completion(
        self,
        messages: List[Dict[str, str]],
        temperature: float = 0.7,
        max_tokens: Optional[int] = None,
        *,
        request: Optional[PromptRequest] = None,
    ) -> str:
        """
        生成对话补全

        Args:
            messages: 消息列表
            temperature: 温度参数
            max_tokens: 最大 token 数
            request: 原始结构化请求（Mock 提供商据此生成响应）

        Returns:
            模型输出的原始文本
        """
        pass


class RemoteLLMProvider(BaseLLMProvider):
    """OpenAI 兼容的远程 Chat Completion 提供商"""

    def __init__(
        self,
        api_key: Optional[str] = None,
        base_url: Optional[str] = None,
        model: Optional[str] = None,
    ):
        config = settings.get_llm_config()
        self.api_key = api_key or config["api_key"]
        self.base_url = base_url or config["base_url"]
        self.model = model or config["model"]

        if not self.api_key:
            raise ProviderUnavailable("FINMEM_LLM_API_KEY 未配置")

        self.client = AsyncOpenAI(
            api_key=self.api_key,
            base_url=self.base_url,
            timeout=httpx.Timeout(settings.llm_timeout, connect=10.0),
            max_retries=0,
        )
        self._in_flight = asyncio.Semaphore(settings.llm_max_in_flight)

    @async_retry(max_retries=settings.llm_max_retries, delay=1.0, retry_on=(APIError, httpx.HTTPError))
    async def _create_completion(
        self,
        messages: List[Dict[str, str]],
        temperature: float,
        max_tokens: Optional[int],
    ) -> str:
        """内部方法：调用 OpenAI 兼容 API"""
        kwargs = {
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
        }
        if max_tokens:
            kwargs["max_tokens"] = max_tokens

        async with self._in_flight:
            response = await self.client.chat.completions.create(**kwargs)
        return response.choices[0].message.content or ""

    async def chat_completion(
        self,
        messages: List[Dict[str, str]],
        temperature: float = 0.7,
        max_tokens: Optional[int] = None,
        *,
        request: Optional[PromptRequest] = None,
    ) -> str:
        log.debug(f"调用远程 LLM: model={self.model}")
        try:
            return await self._create_completion(messages, temperature, max_tokens)
        except (APIError, httpx.HTTPError) as e:
            log.error(f"LLM API 调用失败 ({self.__class__.__name__}): {e}")
            raise ProviderUnavailable(f"LLM 服务不可用: {e}") from e


# ========== Mock 提供商 ==========

class TieRules(BaseModel):
    """情感得分为零时的处理规则"""
    model_config = {"extra": "forbid"}

    zero_score: str = Field(default="trailing_return", pattern="^(trailing_return|Hold)$")
    zero_trailing_return: str = Field(default="Hold", pattern="^(Buy|Sell|Hold)$")


class Rulebook(BaseModel):
    """Mock 提供商的规则文件"""
    model_config = {"extra": "forbid"}

    version: int = 1
    positive_terms: List[str] = Field(min_length=1)
    negative_terms: List[str] = Field(min_length=1)
    summary_sentences: int = Field(default=2, ge=1)
    risk_thresholds: Dict[str, int] = Field(default_factory=lambda: {"Seeking": 1, "Averse": 2})
    tie_rules: TieRules = Field(default_factory=TieRules)


_MEMORY_LINE = re.compile(r"^\[id=(\d+)\]\s*(.*)$")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")
_MEMORY_SLOTS = ("shallow_memories", "intermediate_memories", "deep_memories")
_CITED_KEYS = ("shallow", "intermediate", "deep")


def load_rulebook(path: Path) -> Rulebook:
    """加载并校验 Mock 规则文件"""
    path = Path(path)
    if not path.exists():
        raise MalformedRulebook(f"规则文件不存在: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return Rulebook.model_validate(data)
    except (json.JSONDecodeError, ValidationError) as e:
        raise MalformedRulebook(f"规则文件无效: {path}: {e}") from e


class MockLLMProvider(BaseLLMProvider):
    """
    基于规则文件的确定性提供商

    响应是 (template_id, slots) 的纯函数：摘要回显前 N 个句子并附情感标签；
    反思按检索记忆的词典情感总分定方向，每层引用排名第一的记忆
    """

    model = "mock-rulebook"

    def __init__(self, rulebook: Rulebook):
        self.rulebook = rulebook
        self._positive = {t.lower() for t in rulebook.positive_terms}
        self._negative = {t.lower() for t in rulebook.negative_terms}

    @classmethod
    def from_file(cls, path: Path) -> "MockLLMProvider":
        return cls(load_rulebook(path))

    # ---------- 词典打分 ----------

    def sentiment_score(self, text: str) -> int:
        """正面词数 - 负面词数"""
        tokens = [t for t in _TOKEN_SPLIT.split(text.lower()) if t]
        return sum(t in self._positive for t in tokens) - sum(t in self._negative for t in tokens)

    def sentiment_label(self, text: str) -> str:
        score = self.sentiment_score(text)
        if score > 0:
            return "positive"
        if score < 0:
            return "negative"
        return "neutral"

    @staticmethod
    def parse_memories(block: str) -> List[tuple]:
        """解析 "[id=N] 文本" 行，保持排名顺序"""
        memories = []
        for line in (block or "").splitlines():
            match = _MEMORY_LINE.match(line.strip())
            if match:
                memories.append((int(match.group(1)), match.group(2)))
        return memories

    # ---------- 各模板响应 ----------

    def _summarize(self, slots: Dict[str, str]) -> Dict[str, Any]:
        text = slots.get("document", "").strip()
        fragments = [f.strip() for f in _SENTENCE_SPLIT.split(text) if f.strip()]
        head = " ".join(fragments[: self.rulebook.summary_sentences]) or text or "(empty document)"
        sentiment = self.sentiment_label(text)
        return {"summary": f"{head} [sentiment: {sentiment}]", "sentiment": sentiment}

    def _reflect(self, slots: Dict[str, str], with_direction: bool) -> Dict[str, Any]:
        cited: Dict[str, List[int]] = {}
        score = 0
        for slot, key in zip(_MEMORY_SLOTS, _CITED_KEYS):
            memories = self.parse_memories(slots.get(slot, ""))
            cited[key] = [memories[0][0]] if memories else []
            score += sum(self.sentiment_score(text) for _, text in memories)

        payload: Dict[str, Any] = {"cited_ids": cited}
        if not with_direction:
            label = slots.get("train_label", "")
            payload["rationale"] = (
                f"Next-day label {label}; retrieved memories carry net sentiment {score:+d}."
            )
            return payload

        risk = slots.get("effective_risk", "Seeking")
        threshold = self.rulebook.risk_thresholds.get(risk, 1)
        direction = self._direction(score, threshold, slots.get("trailing_return", "0"))
        payload["direction"] = direction
        payload["rationale"] = (
            f"Net memory sentiment {score:+d} against a {risk} threshold of {threshold} gives {direction}."
        )
        return payload

    def _direction(self, score: int, threshold: int, trailing: str) -> str:
        if score >= threshold:
            return "Buy"
        if score <= -threshold:
            return "Sell"
        if score != 0 or self.rulebook.tie_rules.zero_score == "Hold":
            return "Hold"
        try:
            trailing_return = float(trailing)
        except ValueError:
            trailing_return = 0.0
        if trailing_return > 0:
            return "Buy"
        if trailing_return < 0:
            return "Sell"
        return self.rulebook.tie_rules.zero_trailing_return

    @staticmethod
    def _extended(slots: Dict[str, str]) -> Dict[str, Any]:
        directions = [d.strip() for d in slots.get("directions", "").split(",") if d.strip()]
        counts = ", ".join(f"{d} x{directions.count(d)}" for d in ("Buy", "Sell", "Hold"))
        try:
            window_return = float(slots.get("window_return", "0"))
        except ValueError:
            window_return = 0.0
        summary = (
            f"{slots.get('ticker', '')} review of the last {slots.get('window_m', '')} trading days "
            f"ending {slots.get('date', '')}: decisions {counts}; "
            f"realized window log return {100 * window_return:.4f} percent."
        )
        return {"trend_summary": summary}

    @staticmethod
    def _profile(slots: Dict[str, str]) -> Dict[str, Any]:
        parts = [
            f"You are a seasoned trader specializing in {slots.get('ticker', '')}.",
            slots.get("sector_background", ""),
            slots.get("history_overview", ""),
            slots.get("risk_paragraph", ""),
        ]
        return {"character": " ".join(p.strip() for p in parts if p.strip())}

    async def chat_completion(
        self,
        messages: List[Dict[str, str]],
        temperature: float = 0.7,
        max_tokens: Optional[int] = None,
        *,
        request: Optional[PromptRequest] = None,
    ) -> str:
        if request is None:
            raise ProviderUnavailable("Mock 提供商需要结构化请求")

        slots = request.slots
        template = request.template_id
        if template == TemplateId.SUMMARIZE:
            payload = self._summarize(slots)
        elif template == TemplateId.IMMEDIATE_REFLECT_TRAIN:
            payload = self._reflect(slots, with_direction=False)
        elif template == TemplateId.IMMEDIATE_REFLECT_TEST:
            payload = self._reflect(slots, with_direction=True)
        elif template == TemplateId.EXTENDED_REFLECT:
            payload = self._extended(slots)
        else:
            payload = self._profile(slots)
        return json.dumps(payload, sort_keys=True, ensure_ascii=False)


class LLMFactory:
    """LLM 工厂类"""

    @classmethod
    def create(
        cls,
        provider: ProviderKind = ProviderKind.MOCK,
        rulebook_path: Optional[Path] = None,
        model: Optional[str] = None,
    ) -> BaseLLMProvider:
        """
        创建 LLM 提供商实例

        Args:
            provider: mock / remote
            rulebook_path: Mock 规则文件路径
            model: 远程模型名称（默认取 FINMEM_LLM_MODEL）

        Returns:
            LLM 提供商实例
        """
        if provider == ProviderKind.REMOTE:
            instance = RemoteLLMProvider(model=model)
        else:
            if rulebook_path is None:
                raise MalformedRulebook("Mock 提供商需要规则文件路径")
            instance = MockLLMProvider.from_file(rulebook_path)

        log.info(f"创建 LLM 提供商: {provider.value}, 模型: {instance.model}")
        return instance
