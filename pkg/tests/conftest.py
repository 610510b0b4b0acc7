"""
Pytest 配置文件
共享 fixtures 和测试配置
"""
import os

# 测试不写日志文件，需在导入 app 之前设置
os.environ.setdefault("FINMEM_LOG_TO_FILE", "false")

import asyncio
import socket
from datetime import date
from pathlib import Path
from typing import Dict, List, Optional

import pytest
from dotenv import load_dotenv

from app.config import RunConfig, build_run_config, default_layer_params
from app.models.schemas import PriceRow, PriceSeries, PromptRequest
from app.services.embedding_service import EmbeddingService, HashingEmbedder
from app.services.llm_factory import BaseLLMProvider, MockLLMProvider
from app.services.llm_gateway import LLMGateway
from app.services.memory_service import LayeredMemory
from app.services.synthetic_data import FixtureManifest, FixtureSpec, write_fixture

# 加载环境变量
load_dotenv()

REPO_ROOT = Path(__file__).parent.parent
RULEBOOK_PATH = REPO_ROOT / "data" / "mock_rulebook.json"

# 60 个交易日的合成数据集（2022-01-03 ~ 2022-03-25）上的窗口
FIXTURE_WINDOWS = {
    "train_start": date(2022, 1, 3),
    "train_end": date(2022, 2, 11),
    "test_start": date(2022, 2, 14),
    "test_end": date(2022, 3, 24),
}


@pytest.fixture(scope="session")
def event_loop():
    """创建事件循环 fixture"""
    loop = asyncio.get_event_loop_policy().new_event_loop()
    yield loop
    loop.close()


@pytest.fixture
def no_network(monkeypatch):
    """禁止任何网络连接"""
    def guard(*args, **kwargs):
        raise RuntimeError("测试中禁止网络访问")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket, "create_connection", guard)


class FixedUniform:
    """总是返回同一个均匀数的随机源"""

    def __init__(self, value: float):
        self.value = value

    def random(self) -> float:
        return self.value


class ScriptedProvider(BaseLLMProvider):
    """按顺序返回预设文本的提供商，记录收到的消息"""

    model = "scripted"

    def __init__(self, responses: List[str]):
        self.responses = list(responses)
        self.calls: List[List[Dict[str, str]]] = []

    async def chat_completion(self, messages, temperature=0.7, max_tokens=None, *, request=None):
        self.calls.append(list(messages))
        index = min(len(self.calls) - 1, len(self.responses) - 1)
        return self.responses[index]


def make_series(prices: List[float], start: date = date(2022, 1, 3), ticker: str = "SYN") -> PriceSeries:
    """由复权收盘价列表构建连续交易日的价格序列"""
    import pandas as pd

    days = pd.bdate_range(start=start, periods=len(prices))
    rows = [
        PriceRow(date=d.date(), open=p, high=p, low=p, close=p, adj_close=p, volume=1000)
        for d, p in zip(days, prices)
    ]
    return PriceSeries(ticker=ticker, rows=rows)


@pytest.fixture
def layer_params():
    return default_layer_params()


@pytest.fixture
def memory(layer_params):
    return LayeredMemory(layer_params, promotion_threshold=3)


@pytest.fixture
def embedder():
    return HashingEmbedder(dimension=256)


@pytest.fixture
def embedding_service(embedder):
    """创建 EmbeddingService fixture"""
    return EmbeddingService(embedder)


@pytest.fixture
def mock_provider():
    return MockLLMProvider.from_file(RULEBOOK_PATH)


@pytest.fixture
def gateway(mock_provider):
    return LLMGateway(mock_provider, max_retries=2)


@pytest.fixture
def make_dataset(tmp_path):
    """生成合成数据集"""
    def _make(name: str = "fixture", **spec_kwargs) -> FixtureManifest:
        return write_fixture(FixtureSpec(**spec_kwargs), tmp_path / name)

    return _make


@pytest.fixture
def make_config(tmp_path):
    """基于合成数据集构建运行配置"""
    def _make(manifest: FixtureManifest, output: Optional[str] = None, **overrides) -> RunConfig:
        data = {
            "ticker": manifest.ticker,
            "prices_path": manifest.prices_path,
            "documents_path": manifest.documents_path,
            "metadata_path": manifest.metadata_path,
            "rulebook_path": str(RULEBOOK_PATH),
            "output_dir": str(tmp_path / (output or "out")),
            "seed": 7,
            **FIXTURE_WINDOWS,
        }
        data.update(overrides)
        return build_run_config(data)

    return _make


@pytest.fixture
def sample_texts():
    """示例测试文本"""
    return [
        "SYN shares surge as strong quarterly demand beats expectations.",
        "Analysts downgrade SYN citing declines in orders and bearish guidance.",
        "SYN schedules its annual shareholder meeting for next month.",
    ]
