#!/usr/bin/env python3
"""
合成数据集生成脚本
写出 prices.csv / documents.jsonl / ticker_metadata.json / manifest.json
"""
import argparse
from datetime import date
from pathlib import Path
import sys

# 添加项目路径
sys.path.insert(0, str(Path(__file__).parent))

from app.services.synthetic_data import FixtureSpec, SentimentMode, write_fixture
from app.utils.logger import log


def main() -> int:
    parser = argparse.ArgumentParser(description="生成确定性的合成行情与新闻数据")
    parser.add_argument("--out", "-o", type=Path, default=Path("data/fixture"), help="输出目录")
    parser.add_argument("--ticker", default="SYN")
    parser.add_argument("--start", type=date.fromisoformat, default=date(2022, 1, 3), help="首个交易日")
    parser.add_argument("--days", type=int, default=60, help="交易日数量")
    parser.add_argument("--drift", type=float, default=0.0, help="日对数收益漂移")
    parser.add_argument("--volatility", type=float, default=0.015, help="日对数收益标准差")
    parser.add_argument("--mode", choices=[m.value for m in SentimentMode], default=SentimentMode.LEADING.value)
    parser.add_argument("--news-per-day", type=float, default=2.5)
    parser.add_argument("--no-weekend-news", action="store_true")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    spec = FixtureSpec(
        ticker=args.ticker,
        start=args.start,
        n_days=args.days,
        drift=args.drift,
        volatility=args.volatility,
        mode=SentimentMode(args.mode),
        news_per_day=args.news_per_day,
        weekend_news=not args.no_weekend_news,
        seed=args.seed,
    )
    manifest = write_fixture(spec, args.out)
    log.info(f"✓ 数据集已生成: {manifest.first_date} ~ {manifest.last_date}, 文档 {manifest.counts}")
    print(manifest.model_dump_json(indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
