"""
行情数据服务
加载 OHLCV / 文档数据，建立按日期寻址的数据仓库，并提供价格派生信号
"""
from typing import List, Dict, Optional, Iterable
from datetime import date
from pathlib import Path
from collections import Counter, defaultdict
import json
import math

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.exceptions import (
    DataError,
    MalformedRow,
    DuplicateDate,
    NonPositivePrice,
    MissingField,
    UnknownKind,
    DuplicateId,
    DateNotFound,
    NoNextDay,
    InsufficientHistory,
    UnknownTicker,
)
from app.models.schemas import (
    DailyBundle,
    Direction,
    DocumentKind,
    PriceRow,
    PriceSeries,
    RawDocument,
    WarehouseSummary,
)
from app.utils.logger import log


OHLCV_COLUMNS = ["date", "open", "high", "low", "close", "adj_close", "volume"]
PRICE_COLUMNS = ["open", "high", "low", "close", "adj_close"]
DOCUMENT_FIELDS = ["id", "ticker", "date", "kind", "text"]


def _ensure_exists(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"文件不存在: {path}")
    return path


def _parse_price(value: str, column: str, line_number: int, path: Path) -> float:
    try:
        price = float(value)
    except ValueError:
        raise MalformedRow(line_number, f"{column} 不是数字: {value!r}", str(path))
    if not math.isfinite(price):
        raise MalformedRow(line_number, f"{column} 不是有限数: {value!r}", str(path))
    return price


def _parse_volume(value: str, line_number: int, path: Path) -> int:
    try:
        volume = int(value)
    except ValueError:
        pass
    else:
        if volume < 0:
            raise MalformedRow(line_number, f"volume 不是非负整数: {value!r}", str(path))
        return volume
    try:
        volume = float(value)
    except ValueError:
        raise MalformedRow(line_number, f"volume 不是数字: {value!r}", str(path))
    if not math.isfinite(volume) or not volume.is_integer() or volume < 0:
        raise MalformedRow(line_number, f"volume 不是非负整数: {value!r}", str(path))
    return int(volume)


def load_ohlcv(path: Path, ticker: str) -> PriceSeries:
    """
    加载 OHLCV CSV 文件

    Args:
        path: CSV 路径，表头为 date,open,high,low,close,adj_close,volume
        ticker: 股票代码

    Returns:
        按日期升序排列、已校验的 PriceSeries
    """
    path = _ensure_exists(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise MalformedRow(1, "缺少表头", str(path))
    except pd.errors.ParserError as e:
        raise MalformedRow(1, f"CSV 解析失败: {e}", str(path))

    missing = [c for c in OHLCV_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedRow(1, f"表头缺少列 {missing}", str(path))

    rows: List[PriceRow] = []
    seen: Dict[date, int] = {}
    for idx, record in enumerate(frame[OHLCV_COLUMNS].itertuples(index=False, name=None)):
        line_number = idx + 2  # 表头占第 1 行
        raw_date = record[0].strip()
        try:
            day = date.fromisoformat(raw_date)
        except ValueError:
            raise MalformedRow(line_number, f"日期格式错误: {raw_date!r}", str(path))
        if len(raw_date) != 10:
            raise MalformedRow(line_number, f"日期必须为 YYYY-MM-DD: {raw_date!r}", str(path))

        prices = {
            column: _parse_price(value.strip(), column, line_number, path)
            for column, value in zip(PRICE_COLUMNS, record[1:6])
        }
        for column, price in prices.items():
            if price <= 0:
                raise NonPositivePrice(f"第 {line_number} 行 {column}={price} 必须为正数 ({path})")

        if day in seen:
            raise DuplicateDate(f"日期 {day} 重复出现在第 {seen[day]} 行和第 {line_number} 行 ({path})")
        seen[day] = line_number

        rows.append(PriceRow(date=day, volume=_parse_volume(record[6].strip(), line_number, path), **prices))

    rows.sort(key=lambda r: r.date)
    log.debug(f"加载 OHLCV: {ticker}, {len(rows)} 行, 文件={path}")
    return PriceSeries(ticker=ticker, rows=rows)


def dump_ohlcv(series: PriceSeries, path: Path) -> Path:
    """将价格序列写回 CSV（与 load_ohlcv 互逆）"""
    frame = pd.DataFrame(
        [
            {
                "date": row.date.isoformat(),
                "open": repr(row.open),
                "high": repr(row.high),
                "low": repr(row.low),
                "close": repr(row.close),
                "adj_close": repr(row.adj_close),
                "volume": str(row.volume),
            }
            for row in series.rows
        ],
        columns=OHLCV_COLUMNS,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def load_documents(path: Path) -> List[RawDocument]:
    """
    加载按行分隔的 JSON 文档

    Args:
        path: JSONL 文件路径，字段为 id, ticker, date, kind, text

    Returns:
        文档列表（空文件返回空列表）
    """
    path = _ensure_exists(path)
    documents: List[RawDocument] = []
    seen_ids = set()
    valid_kinds = {k.value for k in DocumentKind}

    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRow(line_number, f"JSON 解析失败: {e}", str(path))
            if not isinstance(record, dict):
                raise MalformedRow(line_number, "记录必须是 JSON 对象", str(path))

            missing = [k for k in DOCUMENT_FIELDS if record.get(k) in (None, "")]
            if missing:
                raise MissingField(f"第 {line_number} 行缺少字段 {missing} ({path})")
            not_text = [k for k in DOCUMENT_FIELDS if not isinstance(record[k], str)]
            if not_text:
                raise MalformedRow(line_number, f"字段 {not_text} 必须是字符串", str(path))
            if record["kind"] not in valid_kinds:
                raise UnknownKind(f"第 {line_number} 行未知文档类型 {record['kind']!r} ({path})")

            try:
                doc = RawDocument.model_validate({k: record[k] for k in DOCUMENT_FIELDS})
            except ValidationError as e:
                raise MalformedRow(line_number, str(e.errors()[0]["msg"]), str(path))

            if doc.id in seen_ids:
                raise DuplicateId(f"第 {line_number} 行文档 ID 重复: {doc.id} ({path})")
            seen_ids.add(doc.id)
            documents.append(doc)

    log.debug(f"加载文档: {len(documents)} 条, 文件={path}")
    return documents


def load_metadata(path: Path) -> Dict[str, str]:
    """
    加载股票元数据

    Args:
        path: JSON 文件，单个 {ticker, sector_text} 对象或其列表

    Returns:
        ticker -> sector_text
    """
    path = _ensure_exists(path)
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"元数据解析失败: {path}: {e}")
    records = payload if isinstance(payload, list) else [payload]
    metadata = {}
    for record in records:
        if not isinstance(record, dict) or not record.get("ticker") or not record.get("sector_text"):
            raise MissingField(f"元数据记录缺少 ticker 或 sector_text ({path})")
        metadata[record["ticker"]] = record["sector_text"]
    return metadata


# ========== 价格派生信号 ==========

def _require_index(prices: PriceSeries, day: date) -> int:
    index = prices.index_of(day)
    if index is None:
        raise DateNotFound(f"{prices.ticker} 价格序列中不存在日期 {day}")
    return index


def direction_label(prices: PriceSeries, day: date) -> Direction:
    """
    训练阶段的市场标签：次日复权收盘价下跌为 Sell，上涨或持平为 Buy
    """
    index = _require_index(prices, day)
    if index + 1 >= len(prices.rows):
        raise NoNextDay(f"{day} 是 {prices.ticker} 的最后一个交易日")
    current = prices.rows[index].adj_close
    following = prices.rows[index + 1].adj_close
    return Direction.SELL if following < current else Direction.BUY


def daily_log_return(prices: PriceSeries, day: date) -> float:
    """ln(p_{t+1} / p_t)"""
    index = _require_index(prices, day)
    if index + 1 >= len(prices.rows):
        raise NoNextDay(f"{day} 是 {prices.ticker} 的最后一个交易日")
    return math.log(prices.rows[index + 1].adj_close / prices.rows[index].adj_close)


def trailing_cumulative_return(prices: PriceSeries, day: date, m: int) -> float:
    """
    截止 day 的最近 m 步对数收益之和

    Args:
        prices: 价格序列
        day: 截止日期（含）
        m: 回看步数

    Returns:
        Σ ln(p_t / p_{t-1})
    """
    if m < 1:
        raise ValueError(f"m 必须为正整数: {m}")
    index = _require_index(prices, day)
    if index < m:
        raise InsufficientHistory(
            f"{prices.ticker} 截止 {day} 只有 {index + 1} 个交易日，需要 {m + 1} 个"
        )
    window = np.array([row.adj_close for row in prices.rows[index - m:index + 1]], dtype=np.float64)
    return float(np.sum(np.log(window[1:] / window[:-1])))


# ========== 数据仓库 ==========

class MarketWarehouse:
    """
    按日期寻址的多股票数据仓库（加载后只读）

    非交易日文档归入下一个交易日的数据包
    """

    def __init__(
        self,
        prices: Dict[str, PriceSeries],
        documents: Iterable[RawDocument],
        metadata: Optional[Dict[str, str]] = None,
    ):
        self._prices = dict(prices)
        self._documents = sorted(documents, key=lambda d: (d.date, d.id))
        self._metadata = dict(metadata or {})

        # ticker -> 归属交易日 -> 文档
        self._attributed: Dict[str, Dict[date, List[RawDocument]]] = defaultdict(lambda: defaultdict(list))
        dropped = 0
        for doc in self._documents:
            series = self._prices.get(doc.ticker)
            if series is None:
                continue
            trading_day = series.next_trading_date(doc.date)
            if trading_day is None:
                dropped += 1
                continue
            self._attributed[doc.ticker][trading_day].append(doc)
        for per_day in self._attributed.values():
            for docs in per_day.values():
                docs.sort(key=lambda d: d.id)
        if dropped:
            log.warning(f"{dropped} 条文档晚于最后一个交易日，已忽略")

    @classmethod
    def from_files(
        cls,
        prices_paths: Dict[str, Path],
        documents_path: Optional[Path] = None,
        metadata_path: Optional[Path] = None,
    ) -> "MarketWarehouse":
        """从文件构建数据仓库"""
        prices = {ticker: load_ohlcv(p, ticker) for ticker, p in prices_paths.items()}
        documents = load_documents(documents_path) if documents_path else []
        metadata = load_metadata(metadata_path) if metadata_path else {}
        warehouse = cls(prices, documents, metadata)
        log.info(
            f"数据仓库加载完成: tickers={sorted(prices)}, 文档={len(documents)}"
        )
        return warehouse

    @property
    def tickers(self) -> List[str]:
        return sorted(self._prices)

    def prices(self, ticker: str) -> PriceSeries:
        if ticker not in self._prices:
            raise UnknownTicker(f"数据仓库中没有 {ticker} 的价格数据")
        return self._prices[ticker]

    def sector_text(self, ticker: str) -> str:
        if ticker not in self._metadata:
            raise UnknownTicker(f"元数据中不存在 {ticker}")
        return self._metadata[ticker]

    def documents(self, ticker: Optional[str] = None) -> List[RawDocument]:
        if ticker is None:
            return list(self._documents)
        return [d for d in self._documents if d.ticker == ticker]

    def bundle(self, ticker: str, day: date, previous_day: Optional[date] = None) -> DailyBundle:
        """
        交易日 day 的数据包

        Args:
            ticker: 股票代码
            day: 交易日
            previous_day: 上一次处理的交易日；为空时包含所有归属日 <= day 的文档

        Returns:
            DailyBundle（文档按 ID 排序）
        """
        series = self.prices(ticker)
        index = series.index_of(day)
        price_row = series.rows[index] if index is not None else None
        documents: List[RawDocument] = []
        for trading_day, docs in sorted(self._attributed.get(ticker, {}).items()):
            if trading_day > day:
                break
            if previous_day is not None and trading_day <= previous_day:
                continue
            documents.extend(docs)
        documents.sort(key=lambda d: d.id)
        return DailyBundle(date=day, price_row=price_row, documents=documents)

    def summary(self, ticker: Optional[str] = None) -> WarehouseSummary:
        """统计各类文档数量与日期覆盖范围"""
        tickers = [ticker] if ticker else self.tickers
        for t in tickers:
            self.prices(t)
        docs = [d for d in self._documents if d.ticker in tickers]
        counts = Counter(d.kind.value for d in docs)
        price_dates = [day for t in tickers for day in self._prices[t].dates]
        return WarehouseSummary(
            tickers=tickers,
            price_rows={t: len(self._prices[t].rows) for t in tickers},
            document_counts={kind.value: counts.get(kind.value, 0) for kind in DocumentKind},
            price_start=min(price_dates) if price_dates else None,
            price_end=max(price_dates) if price_dates else None,
            document_start=min((d.date for d in docs), default=None),
            document_end=max((d.date for d in docs), default=None),
        )
