"""随机数流 - 由单个种子派生出互不干扰的命名随机流。"""

import zlib

import numpy as np

from core.errors import ArgumentError


# 已知的随机流名称
STREAMS = ("synth", "split", "init", "lora", "head", "shuffle", "dropout")


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """
    为指定名称派生独立的随机数生成器

    同一 (seed, stream) 总是得到相同序列；不同 stream 之间相互独立。

    Args:
        seed: 非负整数种子
        stream: 随机流名称

    Returns:
        numpy Generator

    Raises:
        ArgumentError: 种子为负数
    """
    if seed < 0:
        raise ArgumentError(f"种子必须为非负整数: {seed}")

    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
