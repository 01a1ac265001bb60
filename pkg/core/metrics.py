"""评估指标 - 混淆矩阵、二分类与按支持度加权的 P/R/F1。"""

from typing import Dict, Sequence, Tuple

from core.errors import EmptyInput, LengthMismatch


class ConfusionMatrix:
    """混淆矩阵（正类为异常，标签 1）"""

    def __init__(self, tp: int = 0, fp: int = 0, tn: int = 0, fn: int = 0):
        self.tp = tp
        self.fp = fp
        self.tn = tn
        self.fn = fn

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def merge(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        """合并两个计数（与顺序无关）"""
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    def to_dict(self) -> Dict[str, int]:
        return {'tp': self.tp, 'fp': self.fp, 'tn': self.tn, 'fn': self.fn}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"ConfusionMatrix(TP={self.tp}, FP={self.fp}, TN={self.tn}, FN={self.fn})"


class MetricsReport:
    """指标报告"""

    FIELDS = ("accuracy", "precision", "recall", "f1", "precision_w", "recall_w", "f1_w")

    def __init__(self, accuracy: float = 0.0, precision: float = 0.0, recall: float = 0.0,
                 f1: float = 0.0, precision_w: float = 0.0, recall_w: float = 0.0,
                 f1_w: float = 0.0):
        self.accuracy = accuracy
        self.precision = precision
        self.recall = recall
        self.f1 = f1
        self.precision_w = precision_w
        self.recall_w = recall_w
        self.f1_w = f1_w

    @classmethod
    def from_dict(cls, data: Dict) -> 'MetricsReport':
        """从字典创建MetricsReport对象"""
        return cls(**{field: float(data.get(field, 0.0)) for field in cls.FIELDS})

    def to_dict(self) -> Dict[str, float]:
        """转换为字典"""
        return {field: getattr(self, field) for field in self.FIELDS}

    def __repr__(self) -> str:
        return (f"MetricsReport(acc={self.accuracy:.4f}, P={self.precision:.4f}, "
                f"R={self.recall:.4f}, F1={self.f1:.4f}, F1_w={self.f1_w:.4f})")


def _ratio(numerator: int, denominator: int) -> float:
    """分母为 0 时记 0"""
    return numerator / denominator if denominator else 0.0


def harmonic_f1(precision: float, recall: float) -> float:
    """F1 = 2PR/(P+R)，P+R=0 时为 0"""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def confusion(preds: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    """
    统计混淆矩阵

    Raises:
        LengthMismatch: 长度不同
        EmptyInput: 输入为空
    """
    if len(preds) != len(labels):
        raise LengthMismatch(f"预测与标签长度不同: {len(preds)} != {len(labels)}")
    if not preds:
        raise EmptyInput("预测列表为空")

    cm = ConfusionMatrix()
    for pred, label in zip(preds, labels):
        if label == 1:
            if pred == 1:
                cm.tp += 1
            else:
                cm.fn += 1
        elif pred == 1:
            cm.fp += 1
        else:
            cm.tn += 1
    return cm


def binary_scores(cm: ConfusionMatrix) -> MetricsReport:
    """
    二分类指标（正类为异常）

    Returns:
        只填写 accuracy/precision/recall/f1 的报告

    Raises:
        EmptyInput: 总数为 0
    """
    if cm.total == 0:
        raise EmptyInput("混淆矩阵为空")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    return MetricsReport(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        precision=precision,
        recall=recall,
        f1=harmonic_f1(precision, recall)
    )


def per_class_scores(cm: ConfusionMatrix) -> Dict[int, Tuple[float, float, float, int]]:
    """每一类作为正类时的 (precision, recall, f1, 支持度)"""
    p1 = _ratio(cm.tp, cm.tp + cm.fp)
    r1 = _ratio(cm.tp, cm.tp + cm.fn)
    p0 = _ratio(cm.tn, cm.tn + cm.fn)
    r0 = _ratio(cm.tn, cm.tn + cm.fp)
    return {
        0: (p0, r0, harmonic_f1(p0, r0), cm.tn + cm.fp),
        1: (p1, r1, harmonic_f1(p1, r1), cm.tp + cm.fn),
    }


def weighted_scores(cm: ConfusionMatrix) -> Tuple[float, float, float]:
    """
    按真实类别支持度加权平均的 precision/recall/f1

    Raises:
        EmptyInput: 总数为 0
    """
    if cm.total == 0:
        raise EmptyInput("混淆矩阵为空")
    scores = per_class_scores(cm)
    totals = [0.0, 0.0, 0.0]
    for precision, recall, f1, support in scores.values():
        totals[0] += precision * support
        totals[1] += recall * support
        totals[2] += f1 * support
    return tuple(value / cm.total for value in totals)


def full_report(cm: ConfusionMatrix) -> MetricsReport:
    """二分类与加权指标合并为一份报告"""
    report = binary_scores(cm)
    report.precision_w, report.recall_w, report.f1_w = weighted_scores(cm)
    return report


def evaluate_predictions(preds: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    """由预测与标签直接得到完整报告"""
    return full_report(confusion(preds, labels))
