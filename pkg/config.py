"""运行配置 - 扁平 key = value 配置文件，命令行参数优先。"""

import os
import re
from dataclasses import dataclass, fields
from typing import Dict, List, Mapping, Optional, Tuple

from core.drain_parser import DrainTree
from core.errors import ConfigError
from core.peft import LoraConfig, parse_targets
from core.sequencer import SynthSpec
from core.trainer import TrainConfig
from core.transformer import TransformerConfig


_INLINE_COMMENT = re.compile(r"\s+#")


@dataclass
class RunConfig:
    """一次运行的全部配置（每个字段都有默认值）"""

    # Drain 解析
    depth: int = 4
    sim_threshold: float = 0.5
    max_children: int = 100
    plain: bool = False

    # 窗口与划分
    window_size: int = 64
    stride: int = 64
    train_frac: float = 0.8
    val_frac: float = 0.1

    # 合成语料
    synth_vocab: int = 64
    synth_normal_patterns: int = 20
    synth_anomaly_patterns: int = 5
    synth_rate: float = 0.1
    synth_lines: int = 200000
    synth_burst: int = 4

    # 模型结构
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 128
    ffn_dim: int = 0
    init_std: float = 0.02

    # PEFT
    method: str = "lora"
    targets: str = "k_proj"
    target_layers: str = ""
    rank: int = 2
    alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_init_std: float = 0.02
    scale_by_rank: bool = False

    # 训练
    epochs: int = 3
    batch_size: int = 2
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    class_weights: str = "auto"
    seed: int = 42
    eval_split: str = "test"

    # 路径
    logs: str = ""
    templates_out: str = ""
    keys_out: str = ""
    labels_out: str = ""
    keys: str = ""
    labels: str = ""
    templates: str = ""
    data: str = ""
    out: str = ""
    checkpoint: str = ""
    checkpoint_out: str = ""
    report_out: str = ""

    # ==================== 文本格式 ====================

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> Dict[str, object]:
        """转换为字典（声明顺序）"""
        return {name: getattr(self, name) for name in self.field_names()}

    def to_text(self) -> str:
        """序列化为 key = value 文本，结果确定"""
        lines = ["# effective run configuration"]
        for name, value in self.to_dict().items():
            lines.append(f"{name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional['RunConfig'] = None) -> 'RunConfig':
        """
        解析配置文本（整行 # 注释、空白后的行尾 # 注释与空行忽略）

        Args:
            text: 配置文本
            base: 作为默认值的配置

        Raises:
            ConfigError: 格式错误、未知键或取值类型不对
        """
        values: Dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            # 值内的 # 保留（路径可能含 #）
            line = _INLINE_COMMENT.split(line, 1)[0].strip()
            if "=" not in line:
                raise ConfigError(f"第 {number} 行缺少 '=': {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return (base or cls()).with_overrides(values)

    @classmethod
    def from_file(cls, path: str, base: Optional['RunConfig'] = None) -> 'RunConfig':
        """从文件读取配置"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except UnicodeDecodeError as e:
            raise ConfigError(f"配置文件不是 UTF-8 文本: {path}") from e
        return cls.from_text(text, base)

    def with_overrides(self, overrides: Mapping[str, object]) -> 'RunConfig':
        """
        返回覆盖了部分字段的新配置（字符串会按字段类型转换）

        Raises:
            ConfigError: 未知键或取值无法转换
        """
        types = {f.name: f.type for f in fields(self)}
        data = self.to_dict()
        for key, value in overrides.items():
            if key not in types:
                raise ConfigError(f"未知的配置项: {key}")
            data[key] = _coerce(key, value, types[key])
        return RunConfig(**data)

    # ==================== 派生配置 ====================

    def drain_tree(self) -> DrainTree:
        """按配置构造空解析树"""
        return DrainTree(self.depth, self.sim_threshold, self.max_children)

    def transformer_config(self, vocab_size: int, pad_id: Optional[int] = None) -> TransformerConfig:
        """模型结构（词表大小由数据决定）"""
        return TransformerConfig(vocab_size, self.d_model, self.n_heads, self.n_layers,
                                 self.max_len, self.ffn_dim, pad_id, self.init_std)

    def lora_config(self) -> LoraConfig:
        return LoraConfig(self.rank, self.alpha, self.lora_dropout, self.lora_init_std,
                          parse_targets(self.targets), self.target_layer_list(),
                          self.scale_by_rank)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.method, self.epochs, self.batch_size, self.lr,
                           self.class_weight_pair(), self.beta1, self.beta2,
                           self.adam_eps, self.weight_decay, self.seed)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.synth_vocab, self.synth_normal_patterns,
                         self.synth_anomaly_patterns, self.synth_rate,
                         self.synth_lines, self.synth_burst)

    def target_list(self) -> Tuple[str, ...]:
        return tuple(t.strip() for t in self.targets.split(",") if t.strip())

    def target_layer_list(self) -> Optional[Tuple[int, ...]]:
        """目标层（从 1 计），空表示全部层"""
        items = [t.strip() for t in self.target_layers.split(",") if t.strip()]
        if not items:
            return None
        try:
            return tuple(int(t) for t in items)
        except ValueError as e:
            raise ConfigError(f"target_layers 必须是逗号分隔的整数: {self.target_layers}") from e

    def class_weight_pair(self) -> Optional[Tuple[float, float]]:
        """auto 返回 None（按逆频率计算）"""
        if self.class_weights.strip().lower() == "auto":
            return None
        try:
            w0, w1 = (float(t) for t in self.class_weights.split(","))
        except ValueError as e:
            raise ConfigError(f"class_weights 应为 auto 或 'w0,w1': {self.class_weights}") from e
        return w0, w1


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, value: object, kind) -> object:
    """按字段类型转换取值"""
    kind_name = kind if isinstance(kind, str) else kind.__name__
    if not isinstance(value, str):
        if kind_name == "float" and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    try:
        if kind_name == "bool":
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if kind_name == "int":
            return int(value)
        if kind_name == "float":
            return float(value)
    except ValueError as e:
        raise ConfigError(f"配置项 {key} 的取值无效: {value!r}") from e
    return value


class Config:
    """配置来源"""

    CONFIG_ENV = "LOGPEFT_CONFIG"

    @staticmethod
    def get_config_path(cli_path: Optional[str] = None) -> Optional[str]:
        """
        获取配置文件路径

        优先级：命令行 --config > 环境变量 > 无

        环境变量:
            LOGPEFT_CONFIG: 默认配置文件路径
        """
        if cli_path:
            return cli_path
        return os.getenv(Config.CONFIG_ENV) or None

    @staticmethod
    def resolve(cli_overrides: Mapping[str, object],
                cli_config_path: Optional[str] = None) -> RunConfig:
        """
        合成生效配置：命令行参数 > 配置文件 > 默认值

        Args:
            cli_overrides: 命令行显式给出的字段
            cli_config_path: --config 路径

        Returns:
            RunConfig
        """
        config = default_config()
        path = Config.get_config_path(cli_config_path)
        if path:
            config = RunConfig.from_file(path, config)
        return config.with_overrides(cli_overrides)


def default_config() -> RunConfig:
    """默认配置：r=2, α=16, dropout=0.05, batch=2, lr=5e-5, 3 轮, 目标 k_proj"""
    return RunConfig()
