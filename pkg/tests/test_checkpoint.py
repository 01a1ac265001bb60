"""检查点单元测试。"""

import pytest
import os
import struct
import zlib

import numpy as np

import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import RunConfig
from core.errors import CorruptCheckpoint, VersionMismatch
from core.peft import LoraConfig, attach_adapter_head, inject_lora, unfreeze_all
from core.transformer import TransformerConfig, TransformerModel
from data.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint,
                             save_checkpoint)
from data.storage import Storage


@pytest.fixture
def base_model():
    config = TransformerConfig(vocab_size=10, d_model=8, n_heads=2, n_layers=2, max_len=6,
                               init_std=0.1)
    return TransformerModel.initialize(config, seed=1)


@pytest.fixture
def lora_model(base_model):
    model = inject_lora(base_model, LoraConfig(targets=("k_proj", "v_proj")), seed=2)
    rng = np.random.default_rng(0)
    for adapter in model.lora.values():
        adapter.lora_b.values[...] = rng.normal(0.0, 0.1, size=adapter.lora_b.shape)
    return model


@pytest.fixture
def run_config():
    return RunConfig(method="lora", targets="k_proj,v_proj", d_model=8, n_heads=2,
                     n_layers=2, max_len=6)


def sample_inputs(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        length = int(rng.integers(1, 7))
        ids = [int(k) for k in rng.integers(0, 9, size=length)]
        yield ids + [9] * (6 - length), [1] * length + [0] * (6 - length)


def assert_same_logits(a, b):
    for ids, mask in sample_inputs(10):
        np.testing.assert_array_equal(a.logits(ids, mask).values, b.logits(ids, mask).values)


class TestCheckpointRoundTrip:
    """检查点读写测试类"""

    def test_reencode_identical(self, lora_model, run_config):
        """测试载入后再编码得到相同字节"""
        payload = encode_checkpoint(lora_model, run_config, template_count=9)
        restored = decode_checkpoint(payload)
        assert encode_checkpoint(restored.model, restored.config, restored.template_count) == payload

    def test_lora_logits_identical(self, lora_model, run_config):
        """测试 LoRA 模型载入后 logits 逐位相同"""
        restored = decode_checkpoint(encode_checkpoint(lora_model, run_config, 9))

        assert set(restored.model.lora) == set(lora_model.lora)
        assert restored.template_count == 9
        assert restored.vocab_size == 10
        assert restored.config == run_config
        assert_same_logits(lora_model, restored.model)

    def test_freeze_flags_preserved(self, lora_model, run_config):
        """测试冻结标记随检查点保存"""
        restored = decode_checkpoint(encode_checkpoint(lora_model, run_config))
        flags = {name: t.requires_grad for name, t in lora_model.named_parameters()}
        assert {name: t.requires_grad for name, t in restored.model.named_parameters()} == flags
        assert restored.template_count is None

    def test_lora_shares_base_weight(self, lora_model, run_config):
        """测试恢复的适配器引用主干中的投影权重"""
        restored = decode_checkpoint(encode_checkpoint(lora_model, run_config)).model
        for (layer, projection, head), adapter in restored.lora.items():
            assert adapter.base is restored.params[f"layers.{layer}.attn.{projection}.h{head}"]

    def test_adapter_head(self, base_model):
        """测试适配器头模型"""
        model = attach_adapter_head(base_model, seed=3)
        model.adapter_head.b_cls.values[...] = [0.3, -0.2]
        config = RunConfig(method="adapter")
        restored = decode_checkpoint(encode_checkpoint(model, config)).model

        assert restored.adapter_head is not None
        assert not restored.lora
        assert_same_logits(model, restored)

    def test_full_finetune(self, base_model):
        """测试全量微调模型"""
        model = unfreeze_all(base_model)
        restored = decode_checkpoint(encode_checkpoint(model, RunConfig(method="full"))).model
        assert all(t.requires_grad for _, t in restored.named_parameters())
        assert_same_logits(model, restored)

    def test_file_round_trip(self, lora_model, run_config, tmp_path):
        """测试文件读写"""
        storage = Storage(str(tmp_path))
        save_checkpoint(lora_model, run_config, "out/model.ckpt", 9, storage)
        assert (tmp_path / "out" / "model.ckpt").read_bytes()[:len(MAGIC)] == MAGIC
        restored = load_checkpoint("out/model.ckpt", storage)
        assert_same_logits(lora_model, restored.model)


class TestCorruptCheckpoint:
    """损坏检查点测试类"""

    @pytest.fixture
    def payload(self, lora_model, run_config):
        return encode_checkpoint(lora_model, run_config, 9)

    @pytest.mark.parametrize("keep", [4, 20, 200, -1])
    def test_truncated(self, payload, keep):
        """测试截断的文件"""
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(payload[:keep])

    def test_flipped_byte(self, payload):
        """测试数据被改写"""
        damaged = bytearray(payload)
        damaged[len(damaged) // 2] ^= 0xFF
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(bytes(damaged))

    def test_bad_magic(self, payload):
        """测试不是检查点文件"""
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(b"NOTACKPT" + payload[len(MAGIC):])

    def test_version_mismatch(self, payload):
        """测试格式版本不同"""
        future = payload[:len(MAGIC)] + struct.pack("<I", 2) + payload[len(MAGIC) + 4:]
        with pytest.raises(VersionMismatch):
            decode_checkpoint(future)

    def test_empty_file(self):
        """测试空文件"""
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(b"")


def reseal(body):
    """重新计算校验和，模拟内容损坏但校验通过的文件"""
    return body + struct.pack("<I", zlib.crc32(body))


class TestInconsistentCheckpoint:
    """校验通过但内容不一致的检查点测试类"""

    @pytest.fixture
    def payload(self, lora_model, run_config):
        return encode_checkpoint(lora_model, run_config, 9)

    def test_invalid_structure(self, payload):
        """测试模型结构无法构造"""
        (config_len,) = struct.unpack("<I", payload[12:16])
        heads_at = 16 + config_len + 16
        body = payload[:heads_at] + struct.pack("<q", 3) + payload[heads_at + 8:-4]
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(reseal(body))

    def test_unparsable_lora_name(self, payload):
        """测试 LoRA 参数名无法解析"""
        body = payload[:-4].replace(b"lora.layers.0.k_proj.h0", b"lora.layers.X.k_proj.h0")
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(reseal(body))

    def test_bad_embedded_config(self, payload):
        """测试内嵌配置含未知键"""
        body = payload[:-4].replace(b"\ndepth = ", b"\ndeptX = ", 1)
        with pytest.raises(CorruptCheckpoint):
            decode_checkpoint(reseal(body))
