"""评估指标单元测试。"""

import pytest
import os
import random

import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.errors import EmptyInput, LengthMismatch
from core.metrics import (ConfusionMatrix, MetricsReport, binary_scores, confusion,
                          evaluate_predictions, full_report, harmonic_f1,
                          per_class_scores, weighted_scores)


class TestConfusion:
    """混淆矩阵测试类"""

    def test_all_correct(self):
        """测试全部预测正确"""
        cm = confusion([1, 0, 1], [1, 0, 1])
        assert cm == ConfusionMatrix(tp=2, fp=0, tn=1, fn=0)

    def test_all_positive(self):
        """测试全部预测为异常"""
        cm = confusion([1, 1, 1], [1, 0, 0])
        assert cm == ConfusionMatrix(tp=1, fp=2, tn=0, fn=0)

    def test_missed_anomaly(self):
        """测试漏报"""
        cm = confusion([0, 0], [1, 0])
        assert cm == ConfusionMatrix(tp=0, fp=0, tn=1, fn=1)

    def test_length_mismatch(self):
        """测试长度不同"""
        with pytest.raises(LengthMismatch):
            confusion([1], [1, 0])

    def test_empty(self):
        """测试空输入"""
        with pytest.raises(EmptyInput):
            confusion([], [])

    def test_merge_order_independent(self):
        """测试分块统计后合并与整体统计一致"""
        rng = random.Random(4)
        preds = [rng.randint(0, 1) for _ in range(40)]
        labels = [rng.randint(0, 1) for _ in range(40)]
        whole = confusion(preds, labels)
        parts = confusion(preds[20:], labels[20:]).merge(confusion(preds[:20], labels[:20]))
        assert parts == whole
        assert whole.total == 40


class TestBinaryScores:
    """二分类指标测试类"""

    def test_perfect(self):
        """测试完美预测"""
        report = binary_scores(confusion([1, 0, 1], [1, 0, 1]))
        assert (report.accuracy, report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_all_positive(self):
        """测试全部预测为异常的精确率"""
        report = binary_scores(confusion([1, 1, 1], [1, 0, 0]))
        assert report.precision == pytest.approx(1 / 3)
        assert report.recall == 1.0
        assert report.f1 == pytest.approx(0.5)

    def test_no_positive_predictions(self):
        """测试没有预测为异常时精确率记 0"""
        report = binary_scores(confusion([0, 0], [1, 0]))
        assert report.precision == 0.0
        assert report.recall == 0.0
        assert report.f1 == 0.0
        assert report.accuracy == 0.5

    def test_no_positive_labels(self):
        """测试没有异常样本时召回率记 0"""
        report = binary_scores(confusion([0, 0, 0], [0, 0, 0]))
        assert report.recall == 0.0
        assert report.accuracy == 1.0

    def test_harmonic_f1(self):
        """测试 F1 是 P 与 R 的调和平均"""
        assert abs(harmonic_f1(0.9203, 0.5147) - 0.6602) < 5e-4
        assert harmonic_f1(0.0, 0.0) == 0.0

    def test_empty_matrix(self):
        """测试空混淆矩阵"""
        with pytest.raises(EmptyInput):
            binary_scores(ConfusionMatrix())


class TestWeightedScores:
    """加权指标测试类"""

    @staticmethod
    def weighted_oracle(preds, labels):
        """逐类统计的朴素实现"""
        totals = [0.0, 0.0, 0.0]
        for cls in (0, 1):
            tp = sum(1 for p, y in zip(preds, labels) if p == cls and y == cls)
            predicted = sum(1 for p in preds if p == cls)
            support = sum(1 for y in labels if y == cls)
            precision = tp / predicted if predicted else 0.0
            recall = tp / support if support else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            for i, value in enumerate((precision, recall, f1)):
                totals[i] += value * support
        return [value / len(labels) for value in totals]

    def test_matches_oracle(self):
        """测试与逐类朴素统计一致"""
        rng = random.Random(11)
        for _ in range(20):
            n = rng.randint(1, 30)
            preds = [rng.randint(0, 1) for _ in range(n)]
            labels = [rng.randint(0, 1) for _ in range(n)]
            expected = self.weighted_oracle(preds, labels)
            assert weighted_scores(confusion(preds, labels)) == pytest.approx(expected)

    def test_permutation_invariant(self):
        """测试打乱顺序不影响指标"""
        rng = random.Random(2)
        pairs = [(rng.randint(0, 1), rng.randint(0, 1)) for _ in range(50)]
        shuffled = list(pairs)
        rng.shuffle(shuffled)

        a = evaluate_predictions(*map(list, zip(*pairs)))
        b = evaluate_predictions(*map(list, zip(*shuffled)))
        assert a.to_dict() == pytest.approx(b.to_dict())

    def test_per_class_support(self):
        """测试每类支持度"""
        scores = per_class_scores(confusion([1, 0, 0, 1], [1, 1, 0, 0]))
        assert scores[0][3] == 2
        assert scores[1][3] == 2
        assert scores[1][:2] == (0.5, 0.5)

    def test_majority_predictor(self):
        """测试恒预测多数类时加权 F1 高于异常类 F1"""
        report = full_report(confusion([0] * 10, [1] + [0] * 9))
        assert report.f1 == 0.0
        assert report.recall_w == pytest.approx(0.9)
        assert report.f1_w > 0.8


class TestMetricsReport:
    """指标报告测试类"""

    def test_dict_fields(self):
        """测试字段顺序与读取"""
        report = evaluate_predictions([1, 0], [1, 1])
        data = report.to_dict()
        assert list(data) == list(MetricsReport.FIELDS)
        restored = MetricsReport.from_dict(data)
        assert restored.to_dict() == data

    def test_from_partial_dict(self):
        """测试缺失字段默认为 0"""
        report = MetricsReport.from_dict({'f1': '0.5'})
        assert report.f1 == 0.5
        assert report.accuracy == 0.0
