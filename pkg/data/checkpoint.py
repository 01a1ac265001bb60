"""检查点 - 模型参数、冻结标记、运行配置与词表绑定的二进制存档。

文件布局（全部小端）：
    magic(8) | version(u32) | 配置文本 | 模型结构 | 模板数 | LoRA 缩放 | 参数块... | crc32
参数块按名称字典序排列：名称、冻结标记、形状、float64 数值。
"""

import struct
import zlib
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import RunConfig
from core.autodiff import Tensor
from core.errors import CorruptCheckpoint, VersionMismatch
from core.peft import AdapterHead, LoraAdapter
from core.transformer import TransformerConfig, TransformerModel, projection_name
from data.storage import Storage
from utils.logger import get_logger


logger = get_logger(__name__)

MAGIC = b"LOGPEFT\x00"
FORMAT_VERSION = 1
NO_TEMPLATES = -1

_STRUCTURE = struct.Struct("<7qd")    # vocab, d, h, L, max_len, ffn, pad, init_std
_LORA = struct.Struct("<dd")          # scaling, dropout


class Checkpoint:
    """载入后的检查点"""

    def __init__(self, model: TransformerModel, config: RunConfig,
                 template_count: Optional[int] = None, version: int = FORMAT_VERSION):
        self.model = model
        self.config = config
        self.template_count = template_count
        self.version = version

    @property
    def vocab_size(self) -> int:
        return self.model.config.vocab_size


class _Reader:
    """带越界检查的顺序读取器"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.payload):
            raise CorruptCheckpoint(f"检查点被截断（偏移 {self.offset}，需要 {size} 字节）")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def encode_checkpoint(model: TransformerModel, config: RunConfig,
                      template_count: Optional[int] = None) -> bytes:
    """
    把模型与配置编码为字节串（结果确定）

    Args:
        model: 模型（含 LoRA / 适配器头时一并保存）
        config: 生效的运行配置
        template_count: 训练数据的模板数

    Returns:
        检查点字节
    """
    mc = model.config
    adapters = list(model.lora.values())
    scaling = adapters[0].scaling if adapters else 0.0
    dropout = adapters[0].dropout if adapters else 0.0
    config_bytes = config.to_text().encode("utf-8")

    parts: List[bytes] = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        _STRUCTURE.pack(mc.vocab_size, mc.d_model, mc.n_heads, mc.n_layers,
                        mc.max_len, mc.ffn_dim, mc.pad_id, mc.init_std),
        struct.pack("<q", NO_TEMPLATES if template_count is None else template_count),
        _LORA.pack(scaling, dropout),
    ]

    named = model.named_parameters()
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in named:
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", 0 if tensor.requires_grad else 1, tensor.values.ndim))
        parts.append(struct.pack(f"<{tensor.values.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())

    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(payload: bytes) -> Checkpoint:
    """
    解码检查点字节

    Raises:
        VersionMismatch: 格式版本不同
        CorruptCheckpoint: 截断、校验和错误或参数形状不一致
    """
    if len(payload) < len(MAGIC) + 8 or payload[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("不是检查点文件")

    reader = _Reader(payload)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"检查点版本 {version}，当前支持 {FORMAT_VERSION}")

    body, (checksum,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != checksum:
        raise CorruptCheckpoint("检查点校验和不匹配（文件被截断或损坏）")

    (config_len,) = reader.unpack("<I")
    try:
        config = RunConfig.from_text(reader.take(config_len).decode("utf-8"))
    except ValueError as e:
        raise CorruptCheckpoint(f"检查点内的配置无法解析: {e}") from e
    vocab, d, h, n_layers, max_len, ffn, pad, init_std = reader.unpack(_STRUCTURE.format)
    (template_count,) = reader.unpack("<q")
    scaling, dropout = reader.unpack(_LORA.format)

    tensors: Dict[str, Tensor] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpoint("参数名不是 UTF-8") from e
        frozen, ndim = reader.unpack("<BB")
        shape = reader.unpack(f"<{ndim}I")
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(8 * n_values), dtype="<f8").reshape(shape)
        tensors[name] = Tensor(values, requires_grad=not frozen)

    if reader.offset != len(body):
        raise CorruptCheckpoint("参数块之后有多余数据")

    try:
        structure = TransformerConfig(vocab, d, h, n_layers, max_len, ffn, pad, init_std)
    except ValueError as e:
        raise CorruptCheckpoint(f"模型结构无效: {e}") from e
    model = _rebuild_model(structure, tensors, scaling, dropout)
    return Checkpoint(model, config,
                      None if template_count == NO_TEMPLATES else template_count, version)


def _rebuild_model(structure: TransformerConfig, tensors: Dict[str, Tensor],
                   scaling: float, dropout: float) -> TransformerModel:
    """按参数名恢复主干、LoRA 适配器与适配器头"""
    backbone = {n: t for n, t in tensors.items() if not n.startswith(("lora.", "head."))}
    try:
        model = TransformerModel(structure, backbone)
    except ValueError as e:
        raise CorruptCheckpoint(f"参数与模型结构不一致: {e}") from e

    for name in sorted(n for n in tensors if n.startswith("lora.") and n.endswith(".A")):
        prefix = name[:-2]
        # lora.layers.{l}.{proj}.h{h}
        try:
            _, _, layer, projection, head = prefix.split(".")
            key = (int(layer), projection, int(head[1:]))
        except ValueError as e:
            raise CorruptCheckpoint(f"LoRA 参数名无法解析: {name}") from e
        base_name = projection_name(*key)
        if base_name not in model.params or f"{prefix}.B" not in tensors:
            raise CorruptCheckpoint(f"LoRA 参数不完整: {prefix}")
        try:
            model.lora[key] = LoraAdapter(model.params[base_name], tensors[name],
                                          tensors[f"{prefix}.B"], scaling, dropout, prefix)
        except ValueError as e:
            raise CorruptCheckpoint(f"LoRA 参数形状错误: {prefix}") from e

    head_params = {n: t for n, t in tensors.items() if n.startswith("head.")}
    if head_params:
        try:
            model.adapter_head = AdapterHead.from_params(head_params)
        except (KeyError, ValueError) as e:
            raise CorruptCheckpoint("适配器头参数不完整") from e
    return model


def save_checkpoint(model: TransformerModel, config: RunConfig, path: str,
                    template_count: Optional[int] = None, storage: Optional[Storage] = None):
    """写检查点文件"""
    payload = encode_checkpoint(model, config, template_count)
    (storage or Storage()).write_bytes(path, payload)
    logger.info("检查点已保存: %s（%d 字节，%d 个参数块）",
                path, len(payload), len(model.named_parameters()))


def load_checkpoint(path: str, storage: Optional[Storage] = None) -> Checkpoint:
    """
    读检查点文件

    Raises:
        VersionMismatch: 格式版本不同
        CorruptCheckpoint: 文件损坏
    """
    checkpoint = decode_checkpoint((storage or Storage()).read_bytes(path))
    logger.debug("检查点已载入: %s（V=%d）", path, checkpoint.vocab_size)
    return checkpoint
