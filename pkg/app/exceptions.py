"""
异常定义
按 CLI 退出码分为三类：配置错误 (2)、数据错误 (3)、提供商错误 (4)
"""
from typing import Optional


class FinMemError(Exception):
    """所有 FinMem 异常的基类"""

    exit_code: int = 1


# ========== 配置错误 ==========

class ConfigError(FinMemError):
    """运行配置无效"""

    exit_code = 2


class WindowOutOfRange(ConfigError):
    """训练/测试窗口超出数据范围"""


class OverlappingWindows(ConfigError):
    """训练窗口与测试窗口重叠或顺序错误"""


# ========== 数据错误 ==========

class DataError(FinMemError):
    """输入数据或数据访问错误"""

    exit_code = 3


class MalformedRow(DataError):
    """CSV 行无法解析"""

    def __init__(self, line_number: int, reason: str, path: Optional[str] = None):
        self.line_number = line_number
        self.reason = reason
        self.path = path
        where = f"{path}:{line_number}" if path else f"line {line_number}"
        super().__init__(f"行格式错误 ({where}): {reason}")


class DuplicateDate(DataError):
    """价格序列中存在重复日期"""


class NonPositivePrice(DataError):
    """价格必须为正数"""


class MissingField(DataError):
    """文档记录缺少必需字段"""


class UnknownKind(DataError):
    """未知的文档类型"""


class DuplicateId(DataError):
    """文档 ID 重复"""


class DateNotFound(DataError):
    """日期不在价格序列中"""


class NoNextDay(DataError):
    """日期已是最后一个交易日，没有下一日价格"""


class InsufficientHistory(DataError):
    """历史数据不足以计算回看收益"""


class UnknownTicker(DataError):
    """元数据中不存在该股票代码"""


class EmptyWindow(DataError):
    """窗口内交易日不足"""


class CausalityViolation(DataError):
    """测试阶段读取了决策日之后的数据"""


class EmptyText(DataError):
    """记忆事件文本为空"""


class FutureEvent(DataError):
    """查询日期早于事件锚定日期"""


class UnknownEventId(DataError):
    """记忆库中不存在该事件 ID"""


class DimensionMismatch(DataError):
    """向量维度不一致"""


class EmptyLedger(DataError):
    """交易账本为空"""


class InsufficientData(DataError):
    """账本条目不足以计算统计量"""


class ZeroVolatility(DataError):
    """收益标准差为零，夏普比率无定义"""


class SchemaMismatch(DataError):
    """报告文件结构不符合预期"""


class MalformedRulebook(DataError):
    """Mock 规则文件无效"""


# ========== 提供商错误 ==========

class ProviderError(FinMemError):
    """LLM / Embedding 提供商错误"""

    exit_code = 4


class ProviderUnavailable(ProviderError):
    """提供商在有限次重试后仍不可用"""


class ValidationExhausted(ProviderError):
    """结构化输出在所有重试后仍未通过校验"""

    def __init__(self, template_id: str, attempts: int, last_error: str):
        self.template_id = template_id
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(
            f"模板 {template_id} 输出校验失败 (尝试 {attempts} 次): {last_error}"
        )
