"""仅解码器 Transformer - 日志键序列编码与池化分类头。"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import Tensor
from core.errors import ArgumentError, IdOutOfRange, SequenceTooLong, ShapeMismatch
from utils.rng import derive_rng


PROJECTIONS = ("q_proj", "k_proj", "v_proj")
LN_EPS = 1e-5
NUM_CLASSES = 2


class TransformerConfig:
    """模型结构参数"""

    def __init__(self, vocab_size: int, d_model: int = 64, n_heads: int = 4,
                 n_layers: int = 2, max_len: int = 128, ffn_dim: int = 0,
                 pad_id: Optional[int] = None, init_std: float = 0.02):
        """
        Args:
            vocab_size: 词表大小 V（含填充ID）
            d_model: 隐藏维度 d
            n_heads: 头数 h，需整除 d
            n_layers: 层数 L（允许为 0）
            max_len: 最大序列长度
            ffn_dim: 前馈层宽度，0 表示 4d
            pad_id: 填充ID，默认 V−1
            init_std: 初始化标准差
        """
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.max_len = max_len
        self.ffn_dim = ffn_dim if ffn_dim > 0 else 4 * d_model
        self.pad_id = vocab_size - 1 if pad_id is None else pad_id
        self.init_std = init_std
        self.validate()

    @property
    def head_dim(self) -> int:
        """每个头的维度 d_k"""
        return self.d_model // self.n_heads

    def validate(self):
        """检查参数一致性"""
        for name in ("vocab_size", "d_model", "n_heads", "max_len", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} 必须为正: {getattr(self, name)}")
        if self.n_layers < 0:
            raise ArgumentError(f"n_layers 不能为负: {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ArgumentError(f"d_model={self.d_model} 不能被 n_heads={self.n_heads} 整除")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ArgumentError(f"pad_id 超出词表: {self.pad_id}")

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {
            'vocab_size': self.vocab_size,
            'd_model': self.d_model,
            'n_heads': self.n_heads,
            'n_layers': self.n_layers,
            'max_len': self.max_len,
            'ffn_dim': self.ffn_dim,
            'pad_id': self.pad_id,
            'init_std': self.init_std
        }

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """主干与分类头的全部参数名及形状"""
        d, dk, ffn = self.d_model, self.head_dim, self.ffn_dim
        shapes: Dict[str, Tuple[int, ...]] = {
            "embed.tokens": (self.vocab_size, d),
            "embed.positions": (self.max_len, d),
            "classifier.weight": (NUM_CLASSES, d),
            "classifier.bias": (NUM_CLASSES,),
        }
        for layer in range(self.n_layers):
            prefix = f"layers.{layer}"
            for ln in ("ln1", "ln2"):
                shapes[f"{prefix}.{ln}.gain"] = (d,)
                shapes[f"{prefix}.{ln}.bias"] = (d,)
            for proj in PROJECTIONS:
                for head in range(self.n_heads):
                    shapes[projection_name(layer, proj, head)] = (d, dk)
            shapes[f"{prefix}.attn.o_proj.weight"] = (d, d)
            shapes[f"{prefix}.attn.o_proj.bias"] = (d,)
            shapes[f"{prefix}.ffn.up.weight"] = (d, ffn)
            shapes[f"{prefix}.ffn.up.bias"] = (ffn,)
            shapes[f"{prefix}.ffn.down.weight"] = (ffn, d)
            shapes[f"{prefix}.ffn.down.bias"] = (d,)
        return shapes


def projection_name(layer: int, projection: str, head: int) -> str:
    """注意力投影参数名（layer 从 0 计）"""
    return f"layers.{layer}.attn.{projection}.h{head}"


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    仿射变换 W·x + b，权重按 [out×in] 存放

    Args:
        x: [in] 向量
        weight: [out×in]
        bias: [out]

    Returns:
        [out] 向量
    """
    if x.values.ndim != 1 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"linear: 输入 {x.shape} 与权重 {weight.shape} 不匹配")
    row = ad.reshape(x, (1, x.shape[0]))
    out = ad.matmul(row, ad.transpose(weight))
    return ad.reshape(ad.add_bias(out, bias), (weight.shape[0],))


class TransformerModel:
    """仅解码器 Transformer（冻结主干 + 可训练分类头）"""

    def __init__(self, config: TransformerConfig, params: Dict[str, Tensor]):
        """
        用现成参数构造模型

        主干参数默认冻结（视为预训练权重），分类头默认可训练。

        Args:
            config: 结构参数
            params: 参数名到张量的映射，需与 config 的形状一致

        Raises:
            ShapeMismatch: 参数缺失或形状不符
        """
        expected = config.parameter_shapes()
        missing = sorted(set(expected) - set(params))
        if missing:
            raise ShapeMismatch(f"缺少参数: {missing[:3]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeMismatch(f"参数 {name} 形状 {params[name].shape} != {shape}")

        self.config = config
        self.params: Dict[str, Tensor] = {name: params[name] for name in expected}
        for name, tensor in self.params.items():
            tensor.name = name

        # (layer, projection, head) -> LoRA 适配器，由 peft 模块注入
        self.lora: Dict[Tuple[int, str, int], object] = {}
        # 冻结主干之上的适配器分类头，由 peft 模块挂载
        self.adapter_head = None

    @classmethod
    def initialize(cls, config: TransformerConfig, seed: int) -> 'TransformerModel':
        """
        随机初始化：权重 ~ N(0, init_std²)，偏置 0，LN gain 1

        Args:
            config: 结构参数
            seed: 随机种子（使用 "init" 流）

        Returns:
            新模型
        """
        rng = derive_rng(seed, "init")
        params = {}
        for name, shape in sorted(config.parameter_shapes().items()):
            if name.endswith(".gain"):
                values = np.ones(shape)
            elif name.endswith(".bias"):
                values = np.zeros(shape)
            else:
                values = rng.normal(0.0, config.init_std, size=shape)
            params[name] = Tensor(values)

        model = cls(config, params)
        model.freeze_backbone()
        model.params["classifier.weight"].requires_grad = True
        model.params["classifier.bias"].requires_grad = True
        return model

    # ==================== 参数管理 ====================

    def freeze_backbone(self):
        """冻结全部主干参数（不含分类头）"""
        for name, tensor in self.params.items():
            if not name.startswith("classifier."):
                tensor.requires_grad = False

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """全部参数（主干、分类头、LoRA、适配器头），按名称字典序"""
        named = dict(self.params)
        for adapter in self.lora.values():
            named.update(adapter.named_parameters())
        if self.adapter_head is not None:
            named.update(self.adapter_head.named_parameters())
        return sorted(named.items())

    def trainable_parameters(self) -> List[Tensor]:
        """可训练参数，按名称字典序"""
        return [tensor for _, tensor in self.named_parameters() if tensor.requires_grad]

    def zero_grad(self):
        """清除全部梯度"""
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def copy(self) -> 'TransformerModel':
        """复制主干与分类头（不含 LoRA 与适配器头），保留冻结标记"""
        params = {}
        for name, tensor in self.params.items():
            params[name] = Tensor(tensor.values, requires_grad=tensor.requires_grad)
        return TransformerModel(self.config, params)

    # ==================== 前向计算 ====================

    def encode_tokens(self, ids: Sequence[int]) -> Tensor:
        """
        h_t = e_t + p_t

        Args:
            ids: 长度 T 的日志键序列

        Returns:
            [T×d]

        Raises:
            IdOutOfRange: ID 超出词表
            SequenceTooLong: T 超过 max_len
        """
        ids = np.asarray(ids, dtype=np.int64)
        length = ids.shape[0]
        if length == 0:
            raise ShapeMismatch("序列不能为空")
        if length > self.config.max_len:
            raise SequenceTooLong(f"序列长度 {length} 超过 {self.config.max_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IdOutOfRange(f"日志键超出词表 [0, {self.config.vocab_size})")

        tokens = ad.take_rows(self.params["embed.tokens"], ids)
        positions = ad.take_rows(self.params["embed.positions"], np.arange(length))
        return ad.add(tokens, positions)

    def _project(self, hidden: Tensor, layer: int, projection: str, head: int,
                 training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        """单头投影；注入了 LoRA 时走适配器"""
        adapter = self.lora.get((layer, projection, head))
        if adapter is not None:
            return adapter.forward(hidden, training=training, rng=rng)
        return ad.matmul(hidden, self.params[projection_name(layer, projection, head)])

    def attention_mask_matrix(self, length: int, pad_mask: Optional[Sequence[int]] = None,
                              causal: bool = True) -> np.ndarray:
        """允许关注的位置：因果下三角且键位置非填充"""
        allowed = np.ones((length, length), dtype=bool)
        if causal:
            allowed = np.tril(allowed)
        if pad_mask is not None:
            keys = np.asarray(pad_mask, dtype=bool)
            if keys.shape != (length,):
                raise ShapeMismatch(f"掩码长度 {keys.shape} 与序列长度 {length} 不一致")
            allowed = allowed & keys[None, :]
        return allowed

    def attention_heads(self, hidden: Tensor, layer: int,
                        pad_mask: Optional[Sequence[int]] = None, causal: bool = True,
                        training: bool = False,
                        rng: Optional[np.random.Generator] = None) -> List[Tuple[Tensor, Tensor]]:
        """
        逐头计算注意力

        Returns:
            [(注意力权重 [T×T], 头输出 [T×d_k]), ...]
        """
        if hidden.values.ndim != 2 or hidden.shape[1] != self.config.d_model:
            raise ShapeMismatch(f"隐藏状态形状 {hidden.shape} 与 d={self.config.d_model} 不符")

        allowed = self.attention_mask_matrix(hidden.shape[0], pad_mask, causal)
        inv_sqrt = 1.0 / math.sqrt(self.config.head_dim)

        heads = []
        for head in range(self.config.n_heads):
            q = self._project(hidden, layer, "q_proj", head, training, rng)
            k = self._project(hidden, layer, "k_proj", head, training, rng)
            v = self._project(hidden, layer, "v_proj", head, training, rng)
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)
            weights = ad.rowwise_softmax(scores, allowed)
            heads.append((weights, ad.matmul(weights, v)))
        return heads

    def self_attention(self, hidden: Tensor, layer: int,
                       pad_mask: Optional[Sequence[int]] = None, causal: bool = True,
                       training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
        """多头因果自注意力，拼接后做输出投影"""
        heads = self.attention_heads(hidden, layer, pad_mask, causal, training, rng)
        merged = ad.concat_columns([out for _, out in heads])
        prefix = f"layers.{layer}.attn.o_proj"
        return ad.add_bias(ad.matmul(merged, self.params[f"{prefix}.weight"]),
                           self.params[f"{prefix}.bias"])

    def feed_forward(self, hidden: Tensor, layer: int) -> Tensor:
        """ReLU 前馈层"""
        prefix = f"layers.{layer}.ffn"
        up = ad.relu(ad.add_bias(ad.matmul(hidden, self.params[f"{prefix}.up.weight"]),
                                 self.params[f"{prefix}.up.bias"]))
        return ad.add_bias(ad.matmul(up, self.params[f"{prefix}.down.weight"]),
                           self.params[f"{prefix}.down.bias"])

    def decoder_block(self, hidden: Tensor, layer: int,
                      pad_mask: Optional[Sequence[int]] = None,
                      training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
        """Pre-norm 残差块：H + Attn(LN(H))，再 + FFN(LN(·))"""
        prefix = f"layers.{layer}"
        normed = ad.layer_norm(hidden, self.params[f"{prefix}.ln1.gain"],
                               self.params[f"{prefix}.ln1.bias"], LN_EPS)
        hidden = ad.add(hidden, self.self_attention(normed, layer, pad_mask, True, training, rng))
        normed = ad.layer_norm(hidden, self.params[f"{prefix}.ln2.gain"],
                               self.params[f"{prefix}.ln2.bias"], LN_EPS)
        return ad.add(hidden, self.feed_forward(normed, layer))

    def forward(self, ids: Sequence[int], attention_mask: Sequence[int],
                training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        最后一层的逐位置隐藏状态

        Args:
            ids: 日志键序列
            attention_mask: 与 ids 等长的 {0,1} 掩码
            training: 训练模式（启用 LoRA dropout）
            rng: dropout 随机流

        Returns:
            [T×d]
        """
        if len(ids) != len(attention_mask):
            raise ShapeMismatch(f"ids 与掩码长度不一致: {len(ids)} != {len(attention_mask)}")

        hidden = self.encode_tokens(ids)
        for layer in range(self.config.n_layers):
            hidden = self.decoder_block(hidden, layer, attention_mask, training, rng)
        return hidden

    def classify(self, hidden: Tensor, attention_mask: Sequence[int]) -> Tensor:
        """掩码平均池化后接二分类仿射头，返回 2 维 logits"""
        pooled = ad.masked_mean_pool(hidden, attention_mask)
        return linear(pooled, self.params["classifier.weight"], self.params["classifier.bias"])

    def logits(self, ids: Sequence[int], attention_mask: Sequence[int],
               training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        完整分类前向：挂了适配器头时走适配器头，否则走分类头

        Returns:
            [2] logits
        """
        hidden = self.forward(ids, attention_mask, training, rng)
        if self.adapter_head is not None:
            return self.adapter_head.forward(ad.masked_mean_pool(hidden, attention_mask))
        return self.classify(hidden, attention_mask)


def model_forward(model: TransformerModel, ids: Sequence[int],
                  attention_mask: Sequence[int]) -> Tensor:
    """推理模式前向（TransformerModel.forward 的函数形式）"""
    return model.forward(ids, attention_mask)
