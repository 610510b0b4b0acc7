"""
Embedding 服务
本地哈希词袋嵌入（确定性，测试默认）与远程 OpenAI 兼容嵌入服务
"""
from abc import ABC, abstractmethod
from typing import Dict, List, Optional
import asyncio
import hashlib
import re

import numpy as np
from openai import AsyncOpenAI, APIError
import httpx

from app.config import settings
from app.exceptions import DimensionMismatch, ProviderUnavailable
from app.models.schemas import ProviderKind
from app.utils.logger import log
from app.utils.async_helper import async_retry


# 本地嵌入的固定哈希种子（公开、不可变）
HASH_SEED = b"finmem-embed-v1"
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """
    余弦相似度

    Args:
        a: 向量
        b: 向量（维度须与 a 一致）

    Returns:
        [-1, 1] 内的相似度；零向量返回 0
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"向量维度不一致: {a.shape} vs {b.shape}")
    norm = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.clip(float(np.dot(a, b)) / norm, -1.0, 1.0))


class BaseEmbeddingProvider(ABC):
    """Embedding 提供商基类"""

    dimension: int

    @abstractmethod
    async def embed_text(self, text: str) -> np.ndarray:
        """生成单个文本的单位长度向量"""
        pass


class HashingEmbedder(BaseEmbeddingProvider):
    """
    本地哈希词袋嵌入

    小写化 → 按非字母数字切分 → 每个词与相邻词对哈希到 D 个桶之一 → 计数 → L2 归一化。
    纯函数：相同文本得到逐位相同的向量；空文本映射到保留基向量 e0。
    """

    def __init__(self, dimension: int = 256):
        if dimension < 2:
            raise ValueError(f"dimension 至少为 2: {dimension}")
        self.dimension = dimension

    @staticmethod
    def tokenize(text: str) -> List[str]:
        return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]

    def _bucket(self, feature: str) -> int:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=HASH_SEED).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def encode(self, text: str) -> np.ndarray:
        """同步版本，供记忆库与测试直接调用"""
        tokens = self.tokenize(text)
        vector = np.zeros(self.dimension, dtype=np.float64)
        if not tokens:
            vector[0] = 1.0
            return vector
        features = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
        for feature in features:
            vector[self._bucket(feature)] += 1.0
        return vector / np.linalg.norm(vector)

    async def embed_text(self, text: str) -> np.ndarray:
        return self.encode(text)


class RemoteEmbeddingProvider(BaseEmbeddingProvider):
    """OpenAI 兼容的远程 Embedding 服务"""

    def __init__(
        self,
        api_key: Optional[str] = None,
        base_url: Optional[str] = None,
        model: Optional[str] = None,
        dimension: int = 1536,
    ):
        config = settings.get_embedding_config()
        self.api_key = api_key or config["api_key"]
        self.base_url = base_url or config["base_url"]
        self.model = model or config["model"]
        self.dimension = dimension

        if not self.api_key:
            raise ProviderUnavailable("FINMEM_EMBED_API_KEY 未配置")

        self.client = AsyncOpenAI(
            api_key=self.api_key,
            base_url=self.base_url,
            timeout=httpx.Timeout(settings.embed_timeout, connect=10.0),
            max_retries=0,  # 重试由 async_retry 负责
        )
        self._in_flight = asyncio.Semaphore(settings.embed_max_in_flight)
        log.info(f"初始化远程 Embedding 服务: 模型={self.model}")

    @async_retry(max_retries=settings.embed_max_retries, delay=1.0, retry_on=(APIError, httpx.HTTPError))
    async def _request(self, text: str) -> List[float]:
        async with self._in_flight:
            response = await self.client.embeddings.create(model=self.model, input=text)
        return response.data[0].embedding

    async def embed_text(self, text: str) -> np.ndarray:
        try:
            raw = await self._request(text)
        except (APIError, httpx.HTTPError) as e:
            log.error(f"生成 embedding 失败: {e}")
            raise ProviderUnavailable(f"Embedding 服务不可用: {e}") from e

        vector = np.asarray(raw, dtype=np.float64)
        if vector.shape != (self.dimension,):
            raise DimensionMismatch(f"远程向量维度 {vector.shape[0]} 与配置 {self.dimension} 不一致")
        norm = np.linalg.norm(vector)
        if not np.isfinite(norm) or norm == 0.0:
            vector = np.zeros(self.dimension, dtype=np.float64)
            vector[0] = 1.0
            return vector
        return vector / norm


class EmbeddingService:
    """Embedding 服务：在提供商之上加一层运行内缓存"""

    def __init__(self, provider: BaseEmbeddingProvider):
        self.provider = provider
        self._cache: Dict[str, np.ndarray] = {}

    @property
    def dimension(self) -> int:
        return self.provider.dimension

    async def embed_text(self, text: str) -> np.ndarray:
        """
        生成文本向量（同一次运行内按文本缓存）

        Args:
            text: 输入文本

        Returns:
            单位长度向量（调用方不得原地修改）
        """
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        vector = await self.provider.embed_text(text)
        self._cache[text] = vector
        return vector

    async def embed_batch(self, texts: List[str]) -> List[np.ndarray]:
        """批量生成向量（顺序与输入一致）"""
        if not texts:
            return []
        return list(await asyncio.gather(*(self.embed_text(t) for t in texts)))


def create_embedding_service(
    provider: ProviderKind = ProviderKind.MOCK,
    dimension: int = 256,
) -> EmbeddingService:
    """
    创建 Embedding 服务实例

    Args:
        provider: mock 使用本地哈希嵌入，remote 使用远程服务
        dimension: 本地嵌入维度

    Returns:
        EmbeddingService 实例
    """
    if provider == ProviderKind.REMOTE:
        return EmbeddingService(RemoteEmbeddingProvider())
    return EmbeddingService(HashingEmbedder(dimension=dimension))
