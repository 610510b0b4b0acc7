"""
合成数据生成
确定性的 OHLCV 随机游走 + 新闻 / 10-Q / 10-K 文档，用于测试与演示
"""
from typing import List, Dict, Optional
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
import json

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.models.schemas import DocumentKind, PriceRow, PriceSeries, RawDocument
from app.services.market_data import dump_ohlcv
from app.utils.logger import log
from app.utils.rng import RngStreams


class SentimentMode(str, Enum):
    """新闻情感与价格走势的关系"""
    LEADING = "leading"          # 情感 = 次日涨跌方向
    CONTRARIAN = "contrarian"    # 情感与次日涨跌相反
    NOISE = "noise"              # 随机情感


POSITIVE_SENTENCES = [
    "{ticker} shares surge as strong quarterly demand beats expectations.",
    "Analysts upgrade {ticker} citing record deliveries and bullish guidance.",
    "{ticker} posts strong growth and the stock gains in a broad rally.",
]
NEGATIVE_SENTENCES = [
    "{ticker} shares plunge as weak demand misses expectations.",
    "Analysts downgrade {ticker} citing declines in orders and bearish guidance.",
    "{ticker} reports a loss and the stock slumps amid weak sentiment.",
]
NEUTRAL_SENTENCES = [
    "{ticker} schedules its annual shareholder meeting for next month.",
    "{ticker} confirms the date of its next earnings call.",
]
FILLER_SENTENCES = [
    "Trading volume was in line with the monthly average.",
    "The company did not comment further on the report.",
    "Market participants will review the update next week.",
]

SYNTHETIC_SECTOR_TEXT = (
    "{ticker} is a synthetic large-cap technology company used for deterministic backtests. "
    "It designs consumer hardware and sells software subscriptions worldwide."
)


class FixtureSpec(BaseModel):
    """合成数据集参数"""
    ticker: str = "SYN"
    start: date = date(2022, 1, 3)
    n_days: int = Field(default=60, ge=3)
    start_price: float = Field(default=100.0, gt=0)
    drift: float = 0.0
    volatility: float = Field(default=0.015, ge=0)
    mode: SentimentMode = SentimentMode.LEADING
    news_per_day: float = Field(default=2.5, ge=0)
    weekend_news: bool = True
    seed: int = Field(default=7, ge=0)


class FixtureManifest(BaseModel):
    """生成结果清单"""
    ticker: str
    mode: SentimentMode
    seed: int
    trading_days: int
    first_date: date
    last_date: date
    counts: Dict[str, int]
    prices_path: str
    documents_path: str
    metadata_path: str


def generate_prices(spec: FixtureSpec) -> PriceSeries:
    """对数正态随机游走，adj_close = close"""
    rng = RngStreams(spec.seed).stream("prices")
    days = pd.bdate_range(start=spec.start, periods=spec.n_days)
    log_returns = spec.drift + spec.volatility * rng.standard_normal(spec.n_days - 1)
    closes = spec.start_price * np.exp(np.concatenate(([0.0], np.cumsum(log_returns))))
    wicks = np.abs(rng.standard_normal(spec.n_days)) * spec.volatility * 0.5
    volumes = rng.integers(1_000_000, 5_000_000, size=spec.n_days)

    rows = []
    previous_close = closes[0]
    for i, day in enumerate(days):
        close = round(float(closes[i]), 4)
        open_ = round(float(previous_close), 4)
        rows.append(
            PriceRow(
                date=day.date(),
                open=open_,
                high=round(max(open_, close) * (1 + float(wicks[i])), 4),
                low=round(min(open_, close) * (1 - float(wicks[i])), 4),
                close=close,
                adj_close=close,
                volume=int(volumes[i]),
            )
        )
        previous_close = closes[i]
    return PriceSeries(ticker=spec.ticker, rows=rows)


def _next_move(prices: PriceSeries, trading_day: date) -> Optional[float]:
    index = prices.index_of(trading_day)
    if index is None or index + 1 >= len(prices.rows):
        return None
    return prices.rows[index + 1].adj_close - prices.rows[index].adj_close


def _sentiment(spec: FixtureSpec, prices: PriceSeries, trading_day: date, rng: np.random.Generator) -> str:
    move = _next_move(prices, trading_day)
    if spec.mode == SentimentMode.NOISE or move is None:
        return str(rng.choice(["positive", "negative", "neutral"]))
    rising = move >= 0
    if spec.mode == SentimentMode.CONTRARIAN:
        rising = not rising
    return "positive" if rising else "negative"


def _news_text(ticker: str, sentiment: str, rng: np.random.Generator) -> str:
    pool = {
        "positive": POSITIVE_SENTENCES,
        "negative": NEGATIVE_SENTENCES,
        "neutral": NEUTRAL_SENTENCES,
    }[sentiment]
    headline = pool[int(rng.integers(len(pool)))].format(ticker=ticker)
    filler = FILLER_SENTENCES[int(rng.integers(len(FILLER_SENTENCES)))]
    return f"{headline} {filler}"


def generate_documents(spec: FixtureSpec, prices: PriceSeries) -> List[RawDocument]:
    """
    生成新闻与财报

    每个交易日新闻数服从 Poisson(news_per_day)；周五之后的周六追加一条周末新闻；
    新闻情感由其归属交易日的次日走势与 mode 决定
    """
    rng = RngStreams(spec.seed).stream("documents")
    items = []
    for day in prices.dates:
        for _ in range(int(rng.poisson(spec.news_per_day))):
            items.append((day, day))
        if spec.weekend_news and day.weekday() == 4:
            saturday = day + timedelta(days=1)
            trading_day = prices.next_trading_date(saturday)
            if trading_day is not None:
                items.append((saturday, trading_day))

    documents = []
    for i, (published, trading_day) in enumerate(items):
        sentiment = _sentiment(spec, prices, trading_day, rng)
        documents.append(
            RawDocument(
                id=f"{spec.ticker}-news-{i:05d}",
                ticker=spec.ticker,
                date=published,
                kind=DocumentKind.NEWS,
                text=_news_text(spec.ticker, sentiment, rng),
            )
        )

    trend = "growth" if spec.drift >= 0 else "decline"
    dates = prices.dates
    documents.append(
        RawDocument(
            id=f"{spec.ticker}-10k-00001",
            ticker=spec.ticker,
            date=dates[0],
            kind=DocumentKind.FILING_10K,
            text=(
                f"Annual report of {spec.ticker}. Management describes a year of revenue {trend} "
                f"across hardware and subscriptions. Risk factors include supply chain and competition."
            ),
        )
    )
    documents.append(
        RawDocument(
            id=f"{spec.ticker}-10q-00001",
            ticker=spec.ticker,
            date=dates[min(5, len(dates) - 1)],
            kind=DocumentKind.FILING_10Q,
            text=(
                f"Quarterly report of {spec.ticker}. Quarterly revenue shows {trend} versus the prior year. "
                f"Operating cash flow remained stable."
            ),
        )
    )
    return sorted(documents, key=lambda d: (d.date, d.id))


def write_documents(documents: List[RawDocument], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(doc.model_dump(mode="json"), sort_keys=True, ensure_ascii=False)
        for doc in documents
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def write_fixture(spec: FixtureSpec, out_dir: Path) -> FixtureManifest:
    """
    写出完整数据集：prices.csv、documents.jsonl、ticker_metadata.json、manifest.json

    Args:
        spec: 数据集参数
        out_dir: 输出目录

    Returns:
        FixtureManifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prices = generate_prices(spec)
    documents = generate_documents(spec, prices)

    prices_path = dump_ohlcv(prices, out_dir / "prices.csv")
    documents_path = write_documents(documents, out_dir / "documents.jsonl")
    metadata_path = out_dir / "ticker_metadata.json"
    metadata_path.write_text(
        json.dumps(
            [{"ticker": spec.ticker, "sector_text": SYNTHETIC_SECTOR_TEXT.format(ticker=spec.ticker)}],
            indent=2,
        ) + "\n",
        encoding="utf-8",
    )

    counts = {kind.value: sum(d.kind == kind for d in documents) for kind in DocumentKind}
    manifest = FixtureManifest(
        ticker=spec.ticker,
        mode=spec.mode,
        seed=spec.seed,
        trading_days=len(prices.rows),
        first_date=prices.dates[0],
        last_date=prices.dates[-1],
        counts=counts,
        prices_path=str(prices_path),
        documents_path=str(documents_path),
        metadata_path=str(metadata_path),
    )
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    log.info(f"合成数据已写入 {out_dir}: {len(prices.rows)} 个交易日, 文档 {counts}")
    return manifest
