"""
配置管理模块
进程级配置从环境变量和 .env 文件加载（.env 优先级高于系统环境变量）；
单次回测的运行配置从 YAML 文件加载，可被命令行参数覆盖
"""
from pydantic_settings import BaseSettings
from pydantic import BaseModel, Field, ValidationError, model_validator
from typing import Optional, Dict, Any
from datetime import date
from pathlib import Path

import yaml
from dotenv import load_dotenv

from app.exceptions import ConfigError
from app.models.schemas import Layer, LayerParams, ProviderKind, RiskMode

# 在创建 Settings 实例前加载 .env 文件
# override=True 确保 .env 文件的配置优先于系统环境变量
_env_file = Path(__file__).parent.parent / ".env"
if _env_file.exists():
    load_dotenv(_env_file, override=True)


class Settings(BaseSettings):
    """进程配置 - 从 FINMEM_ 前缀的环境变量中读取"""

    # LLM Provider Configuration
    llm_api_key: Optional[str] = Field(default=None, description="远程 LLM API Key")
    llm_endpoint: str = Field(default="https://api.openai.com/v1", description="远程 LLM API Base URL")
    llm_model: str = Field(default="gpt-4-turbo", description="远程 LLM 模型")
    llm_timeout: float = Field(default=120.0, description="LLM 请求超时（秒）")
    llm_max_retries: int = Field(default=3, description="LLM 传输层重试次数")
    llm_max_in_flight: int = Field(default=4, description="LLM 最大并发请求数")

    # Embedding Configuration
    embed_api_key: Optional[str] = Field(default=None, description="远程 Embedding API Key")
    embed_endpoint: str = Field(default="https://api.openai.com/v1", description="远程 Embedding API Base URL")
    embed_model: str = Field(default="text-embedding-ada-002", description="远程 Embedding 模型")
    embed_timeout: float = Field(default=60.0, description="Embedding 请求超时（秒）")
    embed_max_retries: int = Field(default=3, description="Embedding 传输层重试次数")
    embed_max_in_flight: int = Field(default=4, description="Embedding 最大并发请求数")

    # Logging
    log_level: str = Field(default="INFO", description="日志级别")
    log_dir: Path = Field(default=Path("logs"), description="日志目录")
    log_to_file: bool = Field(default=True, description="是否写入日志文件")

    model_config = {
        "env_prefix": "FINMEM_",
        "case_sensitive": False,
        "extra": "ignore",
    }

    def get_llm_config(self) -> Dict[str, Any]:
        """获取远程 LLM 配置"""
        return {
            "api_key": self.llm_api_key,
            "base_url": self.llm_endpoint,
            "model": self.llm_model,
        }

    def get_embedding_config(self) -> Dict[str, Any]:
        """获取远程 Embedding 配置"""
        return {
            "api_key": self.embed_api_key,
            "base_url": self.embed_endpoint,
            "model": self.embed_model,
        }


def default_layer_params() -> Dict[Layer, LayerParams]:
    """各记忆层默认常数"""
    return {
        Layer.SHALLOW: LayerParams(q_stability=14, alpha=0.9, importance_probs=(0.8, 0.15, 0.05)),
        Layer.INTERMEDIATE: LayerParams(q_stability=90, alpha=0.967, importance_probs=(0.05, 0.8, 0.15)),
        Layer.DEEP: LayerParams(q_stability=365, alpha=0.988, importance_probs=(0.05, 0.15, 0.8)),
    }


class RunConfig(BaseModel):
    """单次回测运行配置"""

    model_config = {"extra": "forbid"}

    ticker: str
    prices_path: Path
    documents_path: Path
    metadata_path: Path = Field(default=Path("data/ticker_metadata.json"))
    rulebook_path: Path = Field(default=Path("data/mock_rulebook.json"))
    output_dir: Path = Field(default=Path("output"))
    label: str = "FinMem"

    train_start: date
    train_end: date
    test_start: date
    test_end: date

    k_top: int = Field(default=5, ge=1)
    m_window: int = Field(default=5, ge=1)
    switch_window: int = Field(default=3, ge=1)
    risk: RiskMode = RiskMode.SELF_ADAPTIVE
    promotion_threshold: int = Field(default=3, ge=1)
    seed: Optional[int] = Field(default=None, ge=0, lt=2**64)
    provider: ProviderKind = ProviderKind.MOCK
    temperature: float = Field(default=0.7, ge=0, le=2)
    layers: Dict[Layer, LayerParams] = Field(default_factory=default_layer_params)

    embedding_dimension: int = Field(default=256, ge=2)
    max_validation_retries: int = Field(default=2, ge=0)
    risk_free_daily: float = 0.0
    annualize_sharpe: bool = True
    summarize_concurrency: int = Field(default=4, ge=1)
    causality_guard: bool = True
    trials: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_windows(self) -> "RunConfig":
        if self.train_start > self.train_end:
            raise ValueError("train_start 必须不晚于 train_end")
        if self.test_start > self.test_end:
            raise ValueError("test_start 必须不晚于 test_end")
        if self.provider == ProviderKind.MOCK and self.seed is None:
            raise ValueError("seed 在 mock 模式下必填")
        missing = [layer.value for layer in Layer if layer not in self.layers]
        if missing:
            raise ValueError(f"layers 缺少记忆层: {missing}")
        return self

    def to_yaml(self) -> str:
        """导出为可重新解析的 YAML"""
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True, allow_unicode=True)


def _format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        field = ".".join(str(loc) for loc in err["loc"]) or "<root>"
        parts.append(f"{field}: {err['msg']}")
    return "; ".join(parts)


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    """从字典构建运行配置，校验失败时抛出带字段名的 ConfigError"""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置无效: {_format_validation_error(e)}") from e


def load_run_config(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    加载运行配置

    Args:
        path: YAML 配置文件路径（可为空，此时仅使用 overrides）
        overrides: 命令行覆盖项（值为 None 的键被忽略）

    Returns:
        RunConfig 实例
    """
    data: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"配置文件解析失败: {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"配置文件顶层必须是映射: {path}")
        data.update(loaded or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return build_run_config(data)


# 全局配置实例
# 配置优先级：.env 文件 > 系统环境变量 > 默认值
settings = Settings()
