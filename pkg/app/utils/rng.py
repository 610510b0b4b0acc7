"""
可复现随机数
每个用途使用一个命名子流，子流之间互不干扰，便于精确重放
"""
import zlib
from typing import Dict, Optional, Protocol, Sequence

import numpy as np


class UniformSource(Protocol):
    """提供 [0,1) 均匀随机数的对象（numpy Generator 满足此接口）"""

    def random(self) -> float: ...


class RngStreams:
    """由一个 64 位种子派生的命名随机子流"""

    def __init__(self, seed: Optional[int]):
        self.seed = seed
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """获取（或创建）名为 name 的子流"""
        if name not in self._streams:
            # 子流键使用 crc32，保证跨进程稳定（内置 hash 带随机盐）
            key = zlib.crc32(name.encode("utf-8"))
            seq = np.random.SeedSequence(self.seed, spawn_key=(key,))
            self._streams[name] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[name]


def sample_categorical(rng: UniformSource, values: Sequence[int], probs: Sequence[float]) -> int:
    """
    逆 CDF 分类采样：取一次均匀数 u，返回第一个累计概率大于 u 的值

    Args:
        rng: 均匀随机源
        values: 候选值
        probs: 对应概率（和为 1）

    Returns:
        采样值
    """
    u = float(rng.random())
    cumulative = 0.0
    for value, p in zip(values, probs):
        cumulative += p
        if u < cumulative:
            return value
    return values[-1]
