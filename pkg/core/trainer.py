"""训练器 - 加权交叉熵 + AdamW，只更新可训练参数。"""

import math
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import Tensor
from core.errors import (ArgumentError, EmptyBatch, EmptyDataset, NoTrainableParams,
                         ShapeMismatch)
from core.metrics import MetricsReport, evaluate_predictions
from core.sequencer import LogWindow
from core.transformer import TransformerModel
from utils.logger import get_logger
from utils.rng import derive_rng


logger = get_logger(__name__)

METHODS = ("lora", "adapter", "full")


class TrainConfig:
    """训练配置"""

    def __init__(self, method: str = "lora", epochs: int = 3, batch_size: int = 2,
                 lr: float = 5e-5, class_weights: Optional[Tuple[float, float]] = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01, seed: int = 42):
        """
        Args:
            method: lora / adapter / full
            epochs: 训练轮数 T
            batch_size: 批大小
            lr: 学习率 η
            class_weights: (w₀, w₁)，None 表示按训练集逆频率计算
            beta1, beta2, eps: AdamW 矩估计参数
            weight_decay: 解耦权重衰减 λ
            seed: 随机种子（打乱与 dropout）
        """
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.class_weights = tuple(class_weights) if class_weights is not None else None
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.seed = seed

    def validate(self):
        """检查参数范围"""
        if self.method not in METHODS:
            raise ArgumentError(f"未知的训练方法: {self.method}（可选 {', '.join(METHODS)}）")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError(f"epochs 不能为负且 batch_size 必须为正: {self.epochs}, {self.batch_size}")
        if self.lr <= 0:
            raise ArgumentError(f"学习率必须为正: {self.lr}")
        if self.class_weights is not None and \
                (len(self.class_weights) != 2 or min(self.class_weights) <= 0):
            raise ArgumentError(f"类别权重必须是两个正数: {self.class_weights}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 \
                or self.weight_decay < 0:
            raise ArgumentError("AdamW 超参数超出范围")


class EpochRecord:
    """单轮训练记录"""

    def __init__(self, epoch: int, train_loss: float, val_loss: float, val_metrics: MetricsReport):
        self.epoch = epoch
        self.train_loss = train_loss
        self.val_loss = val_loss
        self.val_metrics = val_metrics

    def to_dict(self):
        """转换为字典"""
        data = {'epoch': self.epoch, 'train_loss': self.train_loss, 'val_loss': self.val_loss}
        data.update(self.val_metrics.to_dict())
        return data


class TrainHistory:
    """训练历史"""

    def __init__(self, initial_train_loss: Optional[float] = None):
        self.initial_train_loss = initial_train_loss
        self.epochs: List[EpochRecord] = []

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def final_train_loss(self) -> Optional[float]:
        return self.epochs[-1].train_loss if self.epochs else None


# ==================== 损失与概率 ====================

def class_probabilities(logits: Sequence[float]) -> Tuple[float, float]:
    """二分类 softmax"""
    values = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(values - values.max())
    probs = shifted / shifted.sum()
    return float(probs[0]), float(probs[1])


def wce_loss(logits: Tensor, labels: Sequence[int],
             weights: Tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """
    加权交叉熵：−(1/N)·Σᵢ w_{yᵢ}·log P(yᵢ)

    Args:
        logits: [N×2]
        labels: 长度 N 的 {0,1}
        weights: (w₀, w₁)

    Returns:
        标量损失

    Raises:
        EmptyBatch: N = 0
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyBatch("批次为空")
    if logits.values.ndim != 2 or logits.shape != (labels.size, 2):
        raise ShapeMismatch(f"logits {logits.shape} 与标签数 {labels.size} 不符")

    log_probs = ad.pick(ad.log_softmax(logits), labels)
    sample_weights = ad.constant(np.asarray(weights, dtype=np.float64)[labels])
    return ad.scale(ad.sum_all(ad.mul(log_probs, sample_weights)), -1.0 / labels.size)


def inverse_frequency_weights(labels: Sequence[int]) -> Tuple[float, float]:
    """w_c = N/(2·N_c)；训练集中缺失的类别权重记 1"""
    labels = list(labels)
    if not labels:
        raise EmptyDataset("无法从空数据集计算类别权重")
    total = len(labels)
    counts = (labels.count(0), total - labels.count(0))
    return tuple(total / (2.0 * c) if c else 1.0 for c in counts)


# ==================== AdamW ====================

class AdamWState:
    """AdamW 一阶/二阶矩"""

    def __init__(self, shapes: Sequence[Tuple[int, ...]]):
        self.step = 0
        self.m = [np.zeros(shape) for shape in shapes]
        self.v = [np.zeros(shape) for shape in shapes]


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               lr: float, beta1: float, beta2: float, eps: float, weight_decay: float,
               t: int) -> Tuple[List[np.ndarray], AdamWState]:
    """
    一步 AdamW：θ ← θ − η·m̂/(√v̂ + eps) − η·λ·θ

    Args:
        params: 当前参数
        grads: 梯度
        state: 矩估计（原地更新）
        t: 步数（从 1 计）

    Returns:
        (新参数, state)

    Raises:
        ShapeMismatch: 形状不一致
        ArgumentError: t < 1
    """
    if t < 1:
        raise ArgumentError(f"步数必须从 1 开始: {t}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("参数、梯度与状态数量不一致")

    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    updated = []
    for i, (theta, grad) in enumerate(zip(params, grads)):
        if theta.shape != grad.shape or theta.shape != state.m[i].shape:
            raise ShapeMismatch(f"参数 {theta.shape} 与梯度 {grad.shape} 形状不一致")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * theta)
    state.step = t
    return updated, state


class AdamW:
    """作用于 Tensor 参数的 AdamW 优化器"""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState([p.shape for p in self.params])

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        """用当前梯度更新一步（缺失的梯度按 0 处理）"""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        updated, _ = adamw_step([p.values for p in self.params], grads, self.state,
                                self.lr, self.beta1, self.beta2, self.eps,
                                self.weight_decay, self.state.step + 1)
        for param, values in zip(self.params, updated):
            param.values[...] = values


# ==================== 训练与评估 ====================

class TrainerState(Enum):
    """训练器状态"""
    READY = "ready"
    RUNNING = "running"
    COMPLETED = "completed"


def batch_logits(model: TransformerModel, batch: Sequence[LogWindow], training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """一个批次的 logits [N×2]"""
    return ad.stack_rows([model.logits(w.key_ids, w.attention_mask, training, rng)
                          for w in batch])


def evaluate(model: TransformerModel, dataset: Sequence[LogWindow],
             class_weights: Tuple[float, float] = (1.0, 1.0),
             batch_size: int = 64) -> Tuple[float, MetricsReport]:
    """
    推理模式评估：argmax 预测 + 加权交叉熵均值

    Returns:
        (平均损失, 指标报告)

    Raises:
        EmptyDataset: 数据集为空
    """
    if not dataset:
        raise EmptyDataset("评估数据集为空")

    preds: List[int] = []
    labels: List[int] = []
    weighted_nll = 0.0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset[start:start + batch_size]
            logits = batch_logits(model, batch)
            batch_labels = [w.label for w in batch]
            weighted_nll += wce_loss(logits, batch_labels, class_weights).item() * len(batch)
            preds.extend(int(np.argmax(row)) for row in logits.values)
            labels.extend(batch_labels)

    return weighted_nll / len(dataset), evaluate_predictions(preds, labels)


class Trainer:
    """训练器"""

    def __init__(self, model: TransformerModel, config: TrainConfig):
        """
        Args:
            model: 已按训练方法准备好冻结标记的模型
            config: 训练配置
        """
        config.validate()
        self.model = model
        self.config = config
        self._state = TrainerState.READY
        self._on_epoch: Optional[Callable[[EpochRecord], None]] = None
        self._on_step: Optional[Callable[[int, float], None]] = None

    @property
    def state(self) -> TrainerState:
        return self._state

    def set_progress_callback(self, callback: Callable[[EpochRecord], None]):
        """设置每轮结束回调"""
        self._on_epoch = callback

    def set_step_callback(self, callback: Callable[[int, float], None]):
        """设置每步回调，参数为 (全局步数, 批损失)"""
        self._on_step = callback

    def train(self, train_set: Sequence[LogWindow],
              val_set: Sequence[LogWindow]) -> TrainHistory:
        """
        小批量训练：前向 → 加权交叉熵 → 反向 → AdamW（只更新可训练参数）

        Returns:
            训练历史

        Raises:
            NoTrainableParams: 没有可训练参数
            EmptyDataset: 训练集或验证集为空
        """
        params = self.model.trainable_parameters()
        if not params:
            raise NoTrainableParams("模型没有可训练参数")
        if not train_set or not val_set:
            raise EmptyDataset("训练集与验证集都不能为空")

        config = self.config
        weights = config.class_weights or inverse_frequency_weights([w.label for w in train_set])
        shuffle_rng = derive_rng(config.seed, "shuffle")
        dropout_rng = derive_rng(config.seed, "dropout")
        optimizer = AdamW(params, config.lr, config.beta1, config.beta2,
                          config.eps, config.weight_decay)

        initial_loss, _ = evaluate(self.model, train_set, weights)
        history = TrainHistory(initial_train_loss=initial_loss)
        logger.info("开始训练: method=%s, 可训练参数=%d, 样本=%d, 权重=(%.4f, %.4f)",
                    config.method, sum(p.size for p in params), len(train_set), *weights)

        self._state = TrainerState.RUNNING
        step = 0
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(len(train_set))
            batch_losses = []
            for start in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[start:start + config.batch_size]]
                optimizer.zero_grad()
                logits = batch_logits(self.model, batch, training=True, rng=dropout_rng)
                loss = wce_loss(logits, [w.label for w in batch], weights)
                ad.backward(loss, params)
                optimizer.step()

                step += 1
                batch_losses.append(loss.item())
                if self._on_step:
                    self._on_step(step, loss.item())

            val_loss, val_metrics = evaluate(self.model, val_set, weights)
            record = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, val_metrics)
            history.epochs.append(record)
            logger.info("epoch %d: train_loss=%.6f val_loss=%.6f f1=%.4f",
                        epoch, record.train_loss, val_loss, val_metrics.f1)
            if self._on_epoch:
                self._on_epoch(record)

        self._state = TrainerState.COMPLETED
        return history


def train(model: TransformerModel, train_set: Sequence[LogWindow], val_set: Sequence[LogWindow],
          config: TrainConfig) -> Tuple[TransformerModel, TrainHistory]:
    """训练（Trainer 的函数形式），原地更新模型并返回"""
    history = Trainer(model, config).train(train_set, val_set)
    return model, history


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    """保留最后不满的批次"""
    return math.ceil(n_samples / batch_size)
