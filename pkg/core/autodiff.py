"""反向模式自动微分 - 基于 numpy 双精度数组的最小张量引擎。"""

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ArgumentError, EmptyMask, NotScalar, ShapeMismatch


class _GradMode(threading.local):
    """每个线程独立的建图开关，默认开启"""

    enabled = True


_grad_mode = _GradMode()


def is_grad_enabled() -> bool:
    """当前线程是否构建计算图"""
    return _grad_mode.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """在此上下文中不构建计算图（推理用，只影响当前线程）"""
    previous = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class ComputationNode:
    """计算图节点：操作名、输入张量与反向规则"""

    def __init__(self, op: str, inputs: Tuple['Tensor', ...],
                 backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = inputs
        self.backward_rule = backward_rule


class Tensor:
    """参与求导的稠密数组"""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        """
        初始化张量

        Args:
            values: 数值（复制为 float64 数组）
            requires_grad: 是否需要梯度
            name: 参数名（可选）
        """
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[ComputationNode] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        """形状"""
        return self.values.shape

    @property
    def size(self) -> int:
        """元素个数"""
        return int(self.values.size)

    def item(self) -> float:
        """标量值"""
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        """清除梯度"""
        self.grad = None

    def backward(self, params: Optional[Sequence['Tensor']] = None):
        """从本张量开始反向传播"""
        backward(self, params)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def _result(values: np.ndarray, op: str, inputs: Tuple[Tensor, ...],
            rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """构造运算结果，必要时挂上计算图节点"""
    requires = _grad_mode.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = requires
    out.name = None
    out.grad = None
    out.node = ComputationNode(op, inputs, rule) if requires else None
    return out


def constant(values) -> Tensor:
    """不需要梯度的常量张量"""
    return Tensor(values, requires_grad=False)


# ==================== 逐元素运算 ====================

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: 形状不一致 {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """逐元素加法"""
    _check_same_shape(a, b, "add")
    return _result(a.values + b.values, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """逐元素减法"""
    _check_same_shape(a, b, "sub")
    return _result(a.values - b.values, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """逐元素乘法"""
    _check_same_shape(a, b, "mul")
    return _result(a.values * b.values, "mul", (a, b),
                   lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, factor: float) -> Tensor:
    """乘以常数"""
    factor = float(factor)
    return _result(a.values * factor, "scale", (a,), lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """
    行广播加偏置

    Args:
        x: [m×n] 或 [n]
        bias: [n]
    """
    if bias.values.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeMismatch(f"add_bias: {x.shape} 与偏置 {bias.shape} 不匹配")

    def rule(g):
        return g, (g.sum(axis=0) if g.ndim == 2 else g)

    return _result(x.values + bias.values, "add_bias", (x, bias), rule)


def relu(x: Tensor) -> Tensor:
    """逐元素 max(0, x)，0 处次梯度取 0"""
    positive = x.values > 0
    return _result(np.where(positive, x.values, 0.0), "relu", (x,),
                   lambda g: (g * positive,))


def sum_all(x: Tensor) -> Tensor:
    """全部元素求和，得到标量"""
    return _result(np.array(x.values.sum()), "sum", (x,),
                   lambda g: (np.full(x.shape, float(g)),))


# ==================== 形状运算 ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    矩阵乘法 [m×k]·[k×n]

    Raises:
        ShapeMismatch: 内维不一致或不是二维
    """
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} · {b.shape}")
    return _result(a.values @ b.values, "matmul", (a, b),
                   lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(x: Tensor) -> Tensor:
    """二维转置"""
    if x.values.ndim != 2:
        raise ShapeMismatch(f"transpose: 需要二维张量，得到 {x.shape}")
    return _result(x.values.T.copy(), "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """改变形状（元素数不变）"""
    try:
        values = x.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {x.shape} -> {shape}") from e
    return _result(values, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def take_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """
    按行索引取子矩阵（嵌入查表）

    Args:
        table: [V×d]
        indices: 行号序列
    """
    idx = np.asarray(indices, dtype=np.int64)

    def rule(g):
        grad = np.zeros_like(table.values)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result(table.values[idx], "take_rows", (table,), rule)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    """按列拼接若干 [T×k_i] 张量"""
    if not parts:
        raise ShapeMismatch("concat_columns: 输入为空")
    rows = parts[0].shape[0]
    if any(p.values.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeMismatch("concat_columns: 行数不一致")

    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=1))

    return _result(np.concatenate([p.values for p in parts], axis=1),
                   "concat_columns", tuple(parts), rule)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """把若干 [n] 向量堆叠为 [N×n]"""
    if not vectors:
        raise ShapeMismatch("stack_rows: 输入为空")
    width = vectors[0].shape
    if any(v.shape != width or v.values.ndim != 1 for v in vectors):
        raise ShapeMismatch("stack_rows: 向量形状不一致")

    return _result(np.stack([v.values for v in vectors]), "stack_rows", tuple(vectors),
                   lambda g: tuple(g[i] for i in range(g.shape[0])))


def pick(x: Tensor, columns: Sequence[int]) -> Tensor:
    """每行取一个元素：out[i] = x[i, columns[i]]"""
    cols = np.asarray(columns, dtype=np.int64)
    if x.values.ndim != 2 or cols.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"pick: {x.shape} 与列索引 {cols.shape} 不匹配")
    rows = np.arange(x.shape[0])

    def rule(g):
        grad = np.zeros_like(x.values)
        grad[rows, cols] = g
        return (grad,)

    return _result(x.values[rows, cols], "pick", (x,), rule)


# ==================== 归一化与池化 ====================

def rowwise_softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    逐行 softmax（先减行最大值）

    Args:
        x: [m×n]
        mask: 可选布尔矩阵，False 的位置视为 −∞；整行被屏蔽时输出全 0
    """
    if x.values.ndim != 2 or x.shape[1] < 1:
        raise ShapeMismatch(f"rowwise_softmax: 需要 [m×n], 得到 {x.shape}")

    if mask is None:
        shifted = x.values - x.values.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
    else:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != x.shape:
            raise ShapeMismatch(f"rowwise_softmax: 掩码 {allowed.shape} 与 {x.shape} 不一致")
        masked = np.where(allowed, x.values, -np.inf)
        row_max = masked.max(axis=1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        exp = np.where(allowed, np.exp(np.where(allowed, x.values - row_max, 0.0)), 0.0)

    totals = exp.sum(axis=1, keepdims=True)
    probs = np.divide(exp, totals, out=np.zeros_like(exp), where=totals > 0)

    def rule(g):
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return _result(probs, "softmax", (x,), rule)


def log_softmax(x: Tensor) -> Tensor:
    """逐行 log-softmax"""
    if x.values.ndim != 2:
        raise ShapeMismatch(f"log_softmax: 需要二维张量，得到 {x.shape}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, "log_softmax", (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    逐行层归一化：(x − mean)/sqrt(var + eps)·gain + bias

    Args:
        x: [T×d]
        gain: [d]
        bias: [d]
        eps: 数值稳定项
    """
    if x.values.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeMismatch(f"layer_norm: {x.shape}, gain {gain.shape}, bias {bias.shape}")

    mean = x.values.mean(axis=1, keepdims=True)
    centered = x.values - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g):
        d_normed = g * gain.values
        dx = inv_std * (d_normed
                        - d_normed.mean(axis=1, keepdims=True)
                        - normed * (d_normed * normed).mean(axis=1, keepdims=True))
        return dx, (g * normed).sum(axis=0), g.sum(axis=0)

    return _result(normed * gain.values + bias.values, "layer_norm", (x, gain, bias), rule)


def masked_mean_pool(hidden: Tensor, mask: Sequence[int]) -> Tensor:
    """
    掩码平均池化，只对 mask=1 的行取平均

    Args:
        hidden: [T×d]
        mask: 长度 T 的 {0,1} 序列

    Returns:
        [d] 向量

    Raises:
        EmptyMask: 掩码全为 0
    """
    weights = np.asarray(mask, dtype=np.float64)
    if hidden.values.ndim != 2 or weights.shape != (hidden.shape[0],):
        raise ShapeMismatch(f"masked_mean_pool: {hidden.shape} 与掩码 {weights.shape}")
    count = weights.sum()
    if count <= 0:
        raise EmptyMask("注意力掩码全为 0，无法池化")

    def rule(g):
        return (np.outer(weights, g) / count,)

    return _result(weights @ hidden.values / count, "masked_mean_pool", (hidden,), rule)


# ==================== 反向传播 ====================

def _topological_order(root: Tensor) -> List[Tensor]:
    """需要梯度的子图的拓扑序（输入在前）"""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]

    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for inp in reversed(tensor.node.inputs):
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))

    return order


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None):
    """
    反向传播，把 dLoss/dTensor 累加到叶子张量的 grad

    Args:
        loss: 标量损失
        params: 可选参数列表；其中不可达的参数得到全 0 梯度

    Raises:
        NotScalar: loss 不是标量
    """
    if loss.size != 1:
        raise NotScalar(f"反向传播需要标量，得到形状 {loss.shape}")

    if loss.requires_grad:
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for tensor in reversed(_topological_order(loss)):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            if tensor.node is None:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            for inp, inp_grad in zip(tensor.node.inputs, tensor.node.backward_rule(g)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + inp_grad if key in grads else inp_grad

    for param in params or ():
        if param.grad is None:
            param.grad = np.zeros_like(param.values)


# ==================== 梯度检验 ====================

def _as_float(value: Union[Tensor, float]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_diff_check(f: Callable[[Sequence[Tensor]], Union[Tensor, float]],
                      params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    用中心差分校验解析梯度

    Args:
        f: 以参数列表为输入、返回标量的函数（原地读取参数值）
        params: 待检验参数
        eps: 差分步长

    Returns:
        各坐标 |解析 − 数值| / max(1, |数值|) 的最大值

    Raises:
        ArgumentError: eps 非正
    """
    if eps <= 0:
        raise ArgumentError(f"eps 必须为正: {eps}")

    for param in params:
        param.zero_grad()
    loss = f(params)
    if not isinstance(loss, Tensor):
        raise NotScalar("finite_diff_check 需要函数返回 Tensor")
    backward(loss, params)
    analytic = [param.grad.copy() for param in params]

    worst = 0.0
    with no_grad():
        for param, grad in zip(params, analytic):
            flat = param.values.reshape(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                f_plus = _as_float(f(params))
                flat[i] = original - eps
                f_minus = _as_float(f(params))
                flat[i] = original

                numeric = (f_plus - f_minus) / (2.0 * eps)
                error = abs(grad_flat[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, error)

    return worst
