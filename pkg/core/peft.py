"""参数高效微调 - LoRA 低秩注入与冻结主干上的适配器分类头。"""

from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core import autodiff as ad
from core.autodiff import Tensor
from core.errors import ArgumentError, ShapeMismatch, UnknownTarget
from core.transformer import PROJECTIONS, TransformerModel, linear, projection_name
from utils.logger import get_logger
from utils.rng import derive_rng


logger = get_logger(__name__)

LORA_TARGETS = PROJECTIONS


def parse_targets(text: Union[str, Sequence[str]]) -> Tuple[str, ...]:
    """
    解析目标模块列表（逗号分隔）

    Raises:
        UnknownTarget: 含未知模块名
    """
    names = [t.strip() for t in text.split(",")] if isinstance(text, str) else list(text)
    names = [n for n in names if n]
    for name in names:
        if name not in LORA_TARGETS:
            raise UnknownTarget(f"未知的目标模块: {name}（可选 {', '.join(LORA_TARGETS)}）")
    # 去重并保持规范顺序
    return tuple(t for t in LORA_TARGETS if t in names)


class LoraConfig:
    """LoRA 配置"""

    def __init__(self, rank: int = 2, alpha: float = 16.0, dropout: float = 0.05,
                 init_std: float = 0.02, targets: Sequence[str] = ("k_proj",),
                 layers: Optional[Sequence[int]] = None, scale_by_rank: bool = False):
        """
        Args:
            rank: 秩 r
            alpha: 缩放系数 α
            dropout: 低秩支路输入的 dropout 概率
            init_std: A 的初始化标准差 σ
            targets: 目标投影（q_proj/k_proj/v_proj）
            layers: 目标层（从 1 计），None 表示全部层
            scale_by_rank: True 时使用 α/r 缩放
        """
        self.rank = rank
        self.alpha = alpha
        self.dropout = dropout
        self.init_std = init_std
        self.targets = parse_targets(targets)
        self.layers = tuple(layers) if layers else None
        self.scale_by_rank = scale_by_rank

    @property
    def scaling(self) -> float:
        """低秩更新的实际缩放系数"""
        return self.alpha / self.rank if self.scale_by_rank else self.alpha

    def validate(self, n_layers: Optional[int] = None):
        """
        检查配置

        Raises:
            UnknownTarget: 目标为空
            ArgumentError: 数值超出范围或目标层不存在
        """
        if not self.targets:
            raise UnknownTarget("至少需要一个目标模块")
        if self.rank < 1:
            raise ArgumentError(f"rank 必须为正: {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ArgumentError(f"dropout 必须在 [0, 1) 内: {self.dropout}")
        if self.init_std <= 0:
            raise ArgumentError(f"init_std 必须为正: {self.init_std}")
        if n_layers is not None and self.layers is not None:
            for layer in self.layers:
                if not 1 <= layer <= n_layers:
                    raise ArgumentError(f"目标层 {layer} 不在 1..{n_layers} 内")

    def target_layers(self, n_layers: int) -> List[int]:
        """目标层（从 0 计）"""
        if self.layers is None:
            return list(range(n_layers))
        return sorted({layer - 1 for layer in self.layers})


class LoraAdapter:
    """单个投影矩阵上的低秩适配器：x·W + α·(x·Aᵀ)·Bᵀ"""

    def __init__(self, base: Tensor, lora_a: Tensor, lora_b: Tensor,
                 scaling: float, dropout: float = 0.0, name: str = "lora"):
        """
        Args:
            base: 冻结的基础权重 W [d_in×d_out]
            lora_a: A [r×d_in]
            lora_b: B [d_out×r]
            scaling: 缩放系数
            dropout: 低秩支路 dropout 概率
            name: 参数名前缀
        """
        if lora_a.shape[1] != base.shape[0] or lora_b.shape[0] != base.shape[1] \
                or lora_a.shape[0] != lora_b.shape[1]:
            raise ShapeMismatch(f"LoRA 形状不匹配: W{base.shape}, A{lora_a.shape}, B{lora_b.shape}")

        self.base = base
        self.lora_a = lora_a
        self.lora_b = lora_b
        self.scaling = scaling
        self.dropout = dropout
        self.name = name
        lora_a.name = f"{name}.A"
        lora_b.name = f"{name}.B"

    @property
    def rank(self) -> int:
        return self.lora_a.shape[0]

    @property
    def d_in(self) -> int:
        return self.base.shape[0]

    @property
    def d_out(self) -> int:
        return self.base.shape[1]

    def delta(self) -> np.ndarray:
        """权重更新 ΔW = α·(B·A)ᵀ，形状同 W"""
        return self.scaling * (self.lora_b.values @ self.lora_a.values).T

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(self.lora_a.name, self.lora_a), (self.lora_b.name, self.lora_b)]

    def forward(self, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        return lora_forward(x, self, training, rng)


def lora_init(d_in: int, d_out: int, config: LoraConfig,
              seed: Union[int, np.random.Generator] = 0,
              base: Optional[Tensor] = None, name: str = "lora") -> LoraAdapter:
    """
    创建适配器：B 置零，A ~ N(0, σ²)

    Args:
        d_in: 输入维度
        d_out: 输出维度
        config: LoRA 配置
        seed: 种子或随机数生成器
        base: 基础权重，缺省为冻结的零矩阵
        name: 参数名前缀

    Returns:
        LoraAdapter

    Raises:
        ArgumentError: 维度非正或 r 大于 min(d_in, d_out)
    """
    if d_in <= 0 or d_out <= 0:
        raise ArgumentError(f"维度必须为正: {d_in}, {d_out}")
    if config.rank > min(d_in, d_out):
        raise ArgumentError(f"rank={config.rank} 超过 min({d_in}, {d_out})")

    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "lora")
    lora_a = Tensor(rng.normal(0.0, config.init_std, size=(config.rank, d_in)), requires_grad=True)
    lora_b = Tensor(np.zeros((d_out, config.rank)), requires_grad=True)
    if base is None:
        base = Tensor(np.zeros((d_in, d_out)))

    return LoraAdapter(base, lora_a, lora_b, config.scaling, config.dropout, name)


def lora_forward(x: Tensor, adapter: LoraAdapter, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    x·W + α·dropout(x)·Aᵀ·Bᵀ，dropout 只在训练时作用于低秩支路

    Raises:
        ShapeMismatch: 输入维度与 W 不符
        ArgumentError: 训练模式下需要 dropout 却没有随机流
    """
    if x.values.ndim != 2 or x.shape[1] != adapter.d_in:
        raise ShapeMismatch(f"LoRA 输入 {x.shape} 与 d_in={adapter.d_in} 不符")

    base_out = ad.matmul(x, adapter.base)

    low_rank_in = x
    if training and adapter.dropout > 0.0:
        if rng is None:
            raise ArgumentError("训练模式的 dropout 需要随机数生成器")
        keep = rng.random(x.shape) >= adapter.dropout
        low_rank_in = ad.mul(x, ad.constant(keep / (1.0 - adapter.dropout)))

    low_rank = ad.matmul(ad.matmul(low_rank_in, ad.transpose(adapter.lora_a)),
                         ad.transpose(adapter.lora_b))
    return ad.add(base_out, ad.scale(low_rank, adapter.scaling))


def lora_name(layer: int, projection: str, head: int) -> str:
    """LoRA 参数名前缀（layer 从 0 计）"""
    return f"lora.layers.{layer}.{projection}.h{head}"


def inject_lora(model: TransformerModel, config: LoraConfig, seed: int = 0) -> TransformerModel:
    """
    冻结主干并在目标层的目标投影（逐头）注入 LoRA

    Args:
        model: 原模型（不会被修改）
        config: LoRA 配置
        seed: 随机种子（使用 "lora" 流）

    Returns:
        注入后的新模型，分类头保持可训练

    Raises:
        UnknownTarget: 目标为空或未知
        ArgumentError: 目标层不存在或 r 过大
    """
    config.validate(model.config.n_layers)

    peft_model = model.copy()
    peft_model.freeze_backbone()
    for name in ("classifier.weight", "classifier.bias"):
        peft_model.params[name].requires_grad = True

    rng = derive_rng(seed, "lora")
    d, dk = model.config.d_model, model.config.head_dim
    for layer in config.target_layers(model.config.n_layers):
        for projection in config.targets:
            for head in range(model.config.n_heads):
                base = peft_model.params[projection_name(layer, projection, head)]
                peft_model.lora[(layer, projection, head)] = lora_init(
                    d, dk, config, rng, base=base, name=lora_name(layer, projection, head))

    logger.info("注入 %d 个 LoRA 适配器（targets=%s, r=%d, α=%g）",
                len(peft_model.lora), ",".join(config.targets), config.rank, config.alpha)
    return peft_model


def merge_lora(model: TransformerModel) -> TransformerModel:
    """
    把 W + α·(BA)ᵀ 物化为普通权重，移除全部适配器

    Returns:
        合并后的新模型（冻结标记与原主干一致）
    """
    merged = model.copy()
    for (layer, projection, head), adapter in model.lora.items():
        name = projection_name(layer, projection, head)
        merged.params[name].values = model.params[name].values + adapter.delta()
    if model.adapter_head is not None:
        merged.adapter_head = model.adapter_head
    return merged


# ==================== 适配器分类头 ====================

class AdapterHead:
    """两层 ReLU 适配器 + 分类层"""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_cls", "b_cls")

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                 w_cls: Tensor, b_cls: Tensor):
        """
        Args:
            w1, w2: [d_hidden×d_hidden]
            b1, b2: [d_hidden]
            w_cls: [2×d_hidden]
            b_cls: [2]
        """
        d_hidden = w1.shape[0]
        expected = ((d_hidden, d_hidden), (d_hidden,), (d_hidden, d_hidden),
                    (d_hidden,), (2, d_hidden), (2,))
        tensors = (w1, b1, w2, b2, w_cls, b_cls)
        for tensor, shape in zip(tensors, expected):
            if tensor.shape != shape:
                raise ShapeMismatch(f"适配器头参数形状 {tensor.shape} != {shape}")

        self.w1, self.b1, self.w2, self.b2, self.w_cls, self.b_cls = tensors
        for short, tensor in zip(self.PARAM_NAMES, tensors):
            tensor.name = f"head.{short}"

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def initialize(cls, d_hidden: int, seed: Union[int, np.random.Generator] = 0,
                   init_std: float = 0.02) -> 'AdapterHead':
        """权重 ~ N(0, init_std²)，偏置 0，全部可训练"""
        rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "head")

        def weight(rows: int, cols: int) -> Tensor:
            return Tensor(rng.normal(0.0, init_std, size=(rows, cols)), requires_grad=True)

        def zeros(size: int) -> Tensor:
            return Tensor(np.zeros(size), requires_grad=True)

        return cls(weight(d_hidden, d_hidden), zeros(d_hidden),
                   weight(d_hidden, d_hidden), zeros(d_hidden),
                   weight(2, d_hidden), zeros(2))

    @classmethod
    def from_params(cls, params: Dict[str, Tensor]) -> 'AdapterHead':
        """从 head.* 参数字典重建"""
        return cls(*(params[f"head.{short}"] for short in cls.PARAM_NAMES))

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        tensors = (self.w1, self.b1, self.w2, self.b2, self.w_cls, self.b_cls)
        return [(tensor.name, tensor) for tensor in tensors]

    def forward(self, pooled: Tensor) -> Tensor:
        return adapter_head_forward(pooled, self)


def adapter_head_forward(pooled: Tensor, head: AdapterHead) -> Tensor:
    """
    z¹ = ReLU(W₁s + b₁)，z² = ReLU(W₂z¹ + b₂)，logits = W_cls z² + b_cls

    Args:
        pooled: [d_hidden] 池化向量
        head: 适配器头

    Returns:
        [2] logits
    """
    if pooled.shape != (head.d_hidden,):
        raise ShapeMismatch(f"池化向量 {pooled.shape} 与 d_hidden={head.d_hidden} 不符")
    z1 = ad.relu(linear(pooled, head.w1, head.b1))
    z2 = ad.relu(linear(z1, head.w2, head.b2))
    return linear(z2, head.w_cls, head.b_cls)


def attach_adapter_head(model: TransformerModel, seed: int = 0) -> TransformerModel:
    """
    冻结整个主干（含原分类头），在最终层池化输出上挂适配器头

    Returns:
        新模型
    """
    adapted = model.copy()
    for tensor in adapted.params.values():
        tensor.requires_grad = False
    adapted.adapter_head = AdapterHead.initialize(model.config.d_model, seed,
                                                  model.config.init_std)
    return adapted


def unfreeze_all(model: TransformerModel) -> TransformerModel:
    """全量微调基线：复制模型并解冻全部主干参数"""
    full = model.copy()
    for tensor in full.params.values():
        tensor.requires_grad = True
    return full


# ==================== 参数统计 ====================

class ParameterReport:
    """可训练/冻结参数统计"""

    def __init__(self, trainable: int, frozen: int, breakdown: Dict[str, Dict[str, int]]):
        self.trainable = trainable
        self.frozen = frozen
        self.breakdown = breakdown

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def trainable_ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {
            'trainable': self.trainable,
            'frozen': self.frozen,
            'total': self.total,
            'trainable_ratio': self.trainable_ratio,
            'breakdown': self.breakdown
        }


def _component(name: str) -> str:
    """按参数名归类"""
    if name.startswith("lora."):
        return "lora"
    if name.startswith("head."):
        return "adapter_head"
    if name.startswith("classifier."):
        return "classifier"
    if name.startswith("embed."):
        return "embeddings"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "norm"


def trainable_parameter_report(model: TransformerModel) -> ParameterReport:
    """
    按冻结标记统计参数量，并按组件细分

    Returns:
        ParameterReport
    """
    breakdown: Dict[str, Dict[str, int]] = {}
    trainable = frozen = 0
    for name, tensor in model.named_parameters():
        bucket = breakdown.setdefault(_component(name), {'trainable': 0, 'frozen': 0})
        if tensor.requires_grad:
            bucket['trainable'] += tensor.size
            trainable += tensor.size
        else:
            bucket['frozen'] += tensor.size
            frozen += tensor.size
    return ParameterReport(trainable, frozen, breakdown)
