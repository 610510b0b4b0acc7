"""
LLM 网关
Prompt 模板注册表 + 结构化输出校验与有限次纠错重试
"""
from typing import Dict, List, Optional, Set, Type
from functools import lru_cache
from pathlib import Path
import json
import re

from pydantic import BaseModel, ValidationError

from app.exceptions import ValidationExhausted
from app.models.schemas import (
    CharacterPayload,
    DecisionReflectionPayload,
    ExtendedReflectionPayload,
    Layer,
    PromptRequest,
    StructuredResponse,
    SummaryPayload,
    TemplateId,
    TrainingReflectionPayload,
)
from app.services.llm_factory import BaseLLMProvider
from app.utils.logger import log


TEMPLATES_DIR = Path(__file__).parent / "prompt_templates"
RETRY_SUFFIX = "Respond with only the corrected JSON object."
SYSTEM_PROMPT = "You are a financial trading assistant. Always answer with a single valid JSON object."

_SLOT_PATTERN = re.compile(r"\{\{\s*([a-z_]+)\s*\}\}")


class PromptTemplate:
    """文本模板：双大括号命名槽位，'#' 开头的行为注释"""

    def __init__(self, template_id: TemplateId, text: str, payload_model: Type[BaseModel]):
        self.template_id = template_id
        self.text = "\n".join(line for line in text.splitlines() if not line.startswith("#")).strip()
        self.payload_model = payload_model
        self.required_slots: Set[str] = set(_SLOT_PATTERN.findall(self.text))

    @classmethod
    def from_file(cls, template_id: TemplateId, payload_model: Type[BaseModel]) -> "PromptTemplate":
        path = TEMPLATES_DIR / f"{template_id.value}.txt"
        return cls(template_id, path.read_text(encoding="utf-8"), payload_model)

    def render(self, slots: Dict[str, str]) -> str:
        missing = sorted(self.required_slots - set(slots))
        if missing:
            raise ValueError(f"模板 {self.template_id.value} 缺少槽位: {missing}")
        return _SLOT_PATTERN.sub(lambda m: slots[m.group(1)], self.text)

    def schema_text(self) -> str:
        schema = self.payload_model.model_json_schema()
        return json.dumps(schema, sort_keys=True, ensure_ascii=False)


PAYLOAD_MODELS: Dict[TemplateId, Type[BaseModel]] = {
    TemplateId.SUMMARIZE: SummaryPayload,
    TemplateId.IMMEDIATE_REFLECT_TRAIN: TrainingReflectionPayload,
    TemplateId.IMMEDIATE_REFLECT_TEST: DecisionReflectionPayload,
    TemplateId.EXTENDED_REFLECT: ExtendedReflectionPayload,
    TemplateId.PROFILE_COMPOSE: CharacterPayload,
}


def load_templates() -> Dict[TemplateId, PromptTemplate]:
    """加载全部已注册模板"""
    return {tid: PromptTemplate.from_file(tid, model) for tid, model in PAYLOAD_MODELS.items()}


@lru_cache(maxsize=None)
def load_risk_paragraph(name: str) -> str:
    """读取风险偏好段落（risk_seeking / risk_averse）"""
    text = (TEMPLATES_DIR / f"{name}.txt").read_text(encoding="utf-8")
    return " ".join(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


def strip_code_fence(raw: str) -> str:
    """去掉 ```json ... ``` 包裹"""
    result = raw.strip()
    if result.startswith("```"):
        lines = result.split("\n")
        result = "\n".join(lines[1:-1] if lines[-1].strip() == "```" else lines[1:])
        result = result.strip()
    return result


def check_citations(payload: BaseModel, offered_ids: Optional[Dict[Layer, List[int]]]) -> Optional[str]:
    """
    校验引用的记忆 ID 是否都在 Prompt 中提供过

    Returns:
        错误描述；通过时返回 None
    """
    cited = getattr(payload, "cited_ids", None)
    if cited is None or offered_ids is None:
        return None
    for layer, ids in cited.as_dict().items():
        allowed = set(offered_ids.get(layer, []))
        extra = [i for i in ids if i not in allowed]
        if extra:
            return (
                f"cited_ids.{layer.value} contains ids {extra} that were not offered; "
                f"allowed ids: {sorted(allowed)}"
            )
    return None


class LLMGateway:
    """结构化补全网关"""

    def __init__(
        self,
        provider: BaseLLMProvider,
        max_retries: int = 2,
        templates: Optional[Dict[TemplateId, PromptTemplate]] = None,
    ):
        if max_retries < 0:
            raise ValueError(f"max_retries 不能为负: {max_retries}")
        self.provider = provider
        self.max_retries = max_retries
        self.templates = templates or load_templates()

    def build_messages(self, request: PromptRequest) -> List[Dict[str, str]]:
        template = self.templates[request.template_id]
        prompt = (
            f"{template.render(request.slots)}\n\n"
            f"Answer with a single JSON object that validates against this JSON schema:\n"
            f"{template.schema_text()}"
        )
        return [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]

    def parse(self, request: PromptRequest, raw: str) -> BaseModel:
        """解析并校验原始输出，失败抛出 ValueError / ValidationError"""
        model = self.templates[request.template_id].payload_model
        payload = model.model_validate_json(strip_code_fence(raw))
        error = check_citations(payload, request.offered_ids)
        if error:
            raise ValueError(error)
        return payload

    async def complete(self, request: PromptRequest) -> StructuredResponse:
        """
        结构化补全

        解析失败时附上校验错误重新提问，最多 max_retries 次

        Args:
            request: Prompt 请求

        Returns:
            StructuredResponse（payload 已通过校验）
        """
        messages = self.build_messages(request)
        last_error = ""

        for attempt in range(1, self.max_retries + 2):
            raw = await self.provider.chat_completion(
                messages,
                temperature=request.temperature,
                request=request,
            )
            try:
                payload = self.parse(request, raw)
            except (ValidationError, ValueError) as e:
                last_error = str(e)
                log.warning(
                    f"模板 {request.template_id.value} 输出校验失败 "
                    f"(尝试 {attempt}/{self.max_retries + 1}): {last_error[:200]}"
                )
                messages = messages[:2] + [
                    {"role": "assistant", "content": raw},
                    {"role": "user", "content": f"{last_error}\n{RETRY_SUFFIX}"},
                ]
                continue
            return StructuredResponse(payload=payload, raw_text=raw, attempts=attempt)

        raise ValidationExhausted(request.template_id.value, self.max_retries + 1, last_error)
