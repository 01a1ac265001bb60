"""序列构造 - 带标签日志转为定长日志键窗口，以及合成语料生成。"""

import math
from collections import deque
from typing import Deque, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ArgumentError, EmptyLine, LengthMismatch, TooLong
from utils.rng import derive_rng


NORMAL_MARKER = "-"


class LabeledLine:
    """带异常标记的日志行（Thunderbird 约定）"""

    def __init__(self, is_anomalous: bool, message: str):
        """
        Args:
            is_anomalous: 是否异常
            message: 去掉首列标记后的日志正文
        """
        self.is_anomalous = is_anomalous
        self.message = message

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledLine):
            return NotImplemented
        return (self.is_anomalous, self.message) == (other.is_anomalous, other.message)

    def __repr__(self) -> str:
        return f"LabeledLine({self.is_anomalous}, {self.message!r})"


class LogWindow:
    """定长日志键窗口"""

    def __init__(self, key_ids: List[int], label: int,
                 attention_mask: Optional[List[int]] = None,
                 origin: Tuple[str, int] = ("stream", 0)):
        """
        初始化窗口

        Args:
            key_ids: 日志键序列
            label: 1 表示异常，0 表示正常
            attention_mask: 注意力掩码，默认全 1
            origin: (来源ID, 起始偏移)
        """
        self.key_ids = [int(k) for k in key_ids]
        self.label = int(label)
        self.attention_mask = list(attention_mask) if attention_mask is not None \
            else [1] * len(self.key_ids)
        self.origin = origin

    @property
    def length(self) -> int:
        """真实（非填充）位置数"""
        return sum(self.attention_mask)

    def to_dict(self) -> dict:
        """转换为字典"""
        return {
            'key_ids': list(self.key_ids),
            'label': self.label,
            'attention_mask': list(self.attention_mask),
            'origin': self.origin
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, LogWindow):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"LogWindow(label={self.label}, len={self.length}, origin={self.origin})"


def read_labeled_line(raw: str) -> LabeledLine:
    """
    解析 Thunderbird 格式的日志行

    首列为 "-" 表示正常；否则首列为告警标签，视为异常。两种情况都去掉首列。

    Args:
        raw: 原始日志行

    Returns:
        LabeledLine

    Raises:
        EmptyLine: 去掉首列后正文为空
    """
    parts = raw.strip().split(None, 1)
    if len(parts) < 2 or not parts[1].strip():
        raise EmptyLine(f"日志行缺少正文: {raw!r}")

    marker, message = parts
    return LabeledLine(is_anomalous=(marker != NORMAL_MARKER), message=message.strip())


def iter_labeled_lines(lines: Iterable[str], plain: bool = False) -> Iterator[LabeledLine]:
    """
    流式读取日志行，空行跳过

    Args:
        lines: 行迭代器（如打开的文件）
        plain: True 时不含标签列，全部视为正常

    Yields:
        LabeledLine
    """
    for raw in lines:
        if not raw.strip():
            continue
        if plain:
            yield LabeledLine(False, raw.strip())
            continue
        try:
            yield read_labeled_line(raw)
        except EmptyLine:
            continue


def build_windows(keys: Sequence[int], flags: Sequence[bool],
                  window_size: int, stride: int,
                  source_id: str = "stream") -> List[LogWindow]:
    """
    滑动窗口切分日志键流

    窗口标签为区间内异常标记的逻辑或。

    Args:
        keys: 日志键流
        flags: 每行的异常标记
        window_size: 窗口长度
        stride: 步长

    Returns:
        窗口列表，n < window_size 时为空

    Raises:
        ArgumentError: window_size 或 stride 非正
        LengthMismatch: keys 与 flags 长度不同
    """
    if window_size <= 0 or stride <= 0:
        raise ArgumentError(f"window_size 与 stride 必须为正: {window_size}, {stride}")
    if len(keys) != len(flags):
        raise LengthMismatch(f"keys 与 flags 长度不同: {len(keys)} != {len(flags)}")
    return list(iter_windows(keys, flags, window_size, stride, source_id))


def iter_windows(keys: Iterable[int], flags: Iterable[bool],
                 window_size: int, stride: int,
                 source_id: str = "stream") -> Iterator[LogWindow]:
    """
    流式滑动窗口，只缓存最近 window_size 个日志键

    Raises:
        ArgumentError: window_size 或 stride 非正
        LengthMismatch: 两个流长度不同（在较短的流耗尽时抛出）
    """
    if window_size <= 0 or stride <= 0:
        raise ArgumentError(f"window_size 与 stride 必须为正: {window_size}, {stride}")

    buffer: Deque[Tuple[int, bool]] = deque(maxlen=window_size)
    flag_iter = iter(flags)
    next_start = 0
    for position, key in enumerate(keys, start=1):
        flag = next(flag_iter, None)
        if flag is None:
            raise LengthMismatch(f"异常标记流在第 {position} 个日志键处耗尽")
        buffer.append((key, bool(flag)))

        start = position - window_size
        if start == next_start:
            label = 1 if any(f for _, f in buffer) else 0
            yield LogWindow([k for k, _ in buffer], label, origin=(source_id, start))
            next_start += stride

    if next(flag_iter, None) is not None:
        raise LengthMismatch("异常标记流比日志键流长")


def pad_and_mask(window: LogWindow, max_len: int, pad_id: int) -> LogWindow:
    """
    右侧填充到 max_len 并生成掩码

    Args:
        window: 原窗口（未填充）
        max_len: 目标长度
        pad_id: 填充ID

    Returns:
        新窗口

    Raises:
        TooLong: 窗口长于 max_len
    """
    real = window.key_ids[:window.length]
    if len(real) > max_len:
        raise TooLong(f"窗口长度 {len(real)} 超过 {max_len}")

    padding = max_len - len(real)
    return LogWindow(
        key_ids=real + [pad_id] * padding,
        label=window.label,
        attention_mask=[1] * len(real) + [0] * padding,
        origin=window.origin
    )


def split_dataset(windows: Sequence[LogWindow], train_frac: float, val_frac: float,
                  seed: int) -> Tuple[List[LogWindow], List[LogWindow], List[LogWindow]]:
    """
    按种子打乱后划分训练/验证/测试集

    Args:
        windows: 全部窗口
        train_frac: 训练集比例
        val_frac: 验证集比例
        seed: 随机种子

    Returns:
        (train, val, test)

    Raises:
        ArgumentError: 比例非正或之和不小于 1
    """
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1.0:
        raise ArgumentError(f"无效的划分比例: train={train_frac}, val={val_frac}")

    n = len(windows)
    order = derive_rng(seed, "split").permutation(n)
    n_train = int(math.floor(n * train_frac))
    n_val = int(math.floor(n * val_frac))

    shuffled = [windows[i] for i in order]
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


# ==================== 合成语料 ====================

class SynthSpec:
    """合成语料参数"""

    def __init__(self, vocab_size: int = 64, normal_patterns: int = 20,
                 anomaly_patterns: int = 5, anomaly_rate: float = 0.1,
                 n_lines: int = 200000, burst: int = 4):
        """
        Args:
            vocab_size: 日志键数量 V
            normal_patterns: 正常马尔可夫模式数
            anomaly_patterns: 异常模式数
            anomaly_rate: 异常行比例 ρ
            n_lines: 生成行数
            burst: 一次故障连续出现的异常片段数
        """
        self.vocab_size = vocab_size
        self.normal_patterns = normal_patterns
        self.anomaly_patterns = anomaly_patterns
        self.anomaly_rate = anomaly_rate
        self.n_lines = n_lines
        self.burst = burst

    def validate(self):
        """检查参数范围"""
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ArgumentError(f"异常比例必须在 [0, 1] 内: {self.anomaly_rate}")
        if self.vocab_size < 2:
            raise ArgumentError(f"词表大小至少为 2: {self.vocab_size}")
        if self.normal_patterns < 1 or self.anomaly_patterns < 1:
            raise ArgumentError("正常/异常模式数必须为正")
        if self.n_lines < 0 or self.burst < 1:
            raise ArgumentError("行数不能为负，burst 必须为正")


def _rare_key_count(vocab_size: int) -> int:
    """词表尾部只在异常中出现的稀有键数量"""
    return max(1, vocab_size // 8)


def _build_patterns(spec: SynthSpec, rng: np.random.Generator
                    ) -> Tuple[List[List[int]], List[List[int]]]:
    """生成正常模式（按正常键转移）与异常模式（稀有键 + 违规转移）"""
    n_rare = _rare_key_count(spec.vocab_size)
    n_common = spec.vocab_size - n_rare
    rare_keys = list(range(n_common, spec.vocab_size))

    normal = []
    for _ in range(spec.normal_patterns):
        start = int(rng.integers(n_common))
        length = int(rng.integers(4, 13))
        step = int(rng.integers(1, max(2, n_common)))
        normal.append([(start + i * step) % n_common for i in range(length)])

    anomalous = []
    for _ in range(spec.anomaly_patterns):
        length = int(rng.integers(2, 7))
        pattern = [int(k) for k in rng.integers(n_common, size=length)]
        pattern[int(rng.integers(length))] = int(rng.choice(rare_keys))
        # 逆序打乱正常转移关系
        anomalous.append(pattern[::-1])

    return normal, anomalous


def generate_synthetic(spec: SynthSpec, seed: int) -> Tuple[List[int], List[bool]]:
    """
    生成合成日志键流

    正常片段按种子生成的正常模式输出；故障期间连续注入异常片段，异常行比例约为 ρ。

    Args:
        spec: 合成参数
        seed: 随机种子

    Returns:
        (keys, flags)

    Raises:
        ArgumentError: 参数非法
    """
    spec.validate()
    rng = derive_rng(seed, "synth")
    normal, anomalous = _build_patterns(spec, rng)

    rho = spec.anomaly_rate
    mean_normal = float(np.mean([len(p) for p in normal]))
    mean_incident = float(np.mean([len(p) for p in anomalous])) * spec.burst

    # 每个片段边界开始一次故障的概率，使异常行的期望比例为 ρ
    if rho >= 1.0:
        start_prob = 1.0
    elif rho <= 0.0:
        start_prob = 0.0
    else:
        start_prob = rho * mean_normal / (mean_incident * (1.0 - rho) + rho * mean_normal)

    keys: List[int] = []
    flags: List[bool] = []
    while len(keys) < spec.n_lines:
        if start_prob > 0.0 and rng.random() < start_prob:
            for _ in range(spec.burst):
                pattern = anomalous[int(rng.integers(len(anomalous)))]
                keys.extend(pattern)
                flags.extend([True] * len(pattern))
        else:
            pattern = normal[int(rng.integers(len(normal)))]
            keys.extend(pattern)
            flags.extend([False] * len(pattern))

    return keys[:spec.n_lines], flags[:spec.n_lines]


_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_VERBS = ("started", "finished", "received", "sent", "closed", "opened",
          "scheduled", "checked", "flushed", "synced", "rotated", "mounted")
_ALERT_TAGS = ("KERNDTLB", "VAPI", "ECC", "PBS_CHK", "SCSI")


def _key_name(key: int) -> str:
    """日志键的无数字名称（数字会被预处理掩码）"""
    name = ""
    value = key
    while True:
        name = _LETTERS[value % 26] + name
        value = value // 26 - 1
        if value < 0:
            break
    return f"svc_{name}"


def render_log_line(key: int, is_anomalous: bool, line_no: int) -> str:
    """
    把日志键渲染为 Thunderbird 格式的原始日志行

    首 token 为键名，不同键在解析树第一层即分开；变量部分带数字，会被掩码。

    Args:
        key: 日志键
        is_anomalous: 是否异常
        line_no: 行号（生成时间戳与变量）

    Returns:
        原始日志行
    """
    marker = _ALERT_TAGS[key % len(_ALERT_TAGS)] if is_anomalous else NORMAL_MARKER
    verb = _VERBS[key % len(_VERBS)]
    extra = " ".join(["detail"] * (key % 3))
    body = f"{_key_name(key)} {verb} request {extra} id={line_no} took {line_no % 997}ms"
    return f"{marker} {1131566461 + line_no} tbird-node{line_no % 64} {' '.join(body.split())}"
