"""文本数据存储 - 模板、日志键流、标签流、窗口与报告文件。"""

import os
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from core.drain_parser import LogTemplate
from core.errors import CorruptCheckpoint, DataError
from core.metrics import MetricsReport
from core.sequencer import LogWindow
from core.trainer import TrainHistory


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "accuracy", "precision",
                   "recall", "f1", "f1_weighted")
COMPARISON_COLUMNS = ("config", "trainable", "total", "loss", "accuracy", "precision",
                      "recall", "f1", "f1_weighted")
TEMPLATE_HEADER = "# templates="


def _fmt(value: float) -> str:
    """报告中的浮点格式（固定位数，保证可复现）"""
    return f"{value:.6f}"


class Storage:
    """文件存储管理器"""

    def __init__(self, root: str = "."):
        """
        初始化存储

        Args:
            root: 相对路径的基准目录
        """
        self.root = root

    def resolve(self, path: str) -> str:
        """相对路径按 root 解析"""
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def open_write(self, path: str):
        """以 UTF-8、\\n 换行打开输出文件，必要时创建目录"""
        full = self.resolve(path)
        directory = os.path.dirname(full)
        if directory:
            os.makedirs(directory, exist_ok=True)
        return open(full, "w", encoding="utf-8", newline="\n")

    def iter_lines(self, path: str) -> Iterator[Tuple[int, str]]:
        """
        逐行读取 UTF-8 文本文件

        Yields:
            (行号, 去掉换行符的行)

        Raises:
            DataError: 文件不是合法的 UTF-8
        """
        number = 0
        with open(self.resolve(path), "r", encoding="utf-8") as f:
            try:
                for number, line in enumerate(f, start=1):
                    yield number, line.rstrip("\n")
            except UnicodeDecodeError as e:
                raise DataError(f"{path}: 第 {number} 行之后不是 UTF-8 文本") from e

    # ==================== 模板 ====================

    def write_templates(self, path: str, templates: Iterable[LogTemplate]) -> int:
        """
        写模板文件：id \\t match_count \\t 空格拼接的 token

        Returns:
            写入的模板数量
        """
        count = 0
        with self.open_write(path) as f:
            for template in templates:
                f.write(f"{template.id}\t{template.match_count}\t{template.get_template()}\n")
                count += 1
        return count

    def read_templates(self, path: str) -> List[LogTemplate]:
        """
        读取模板文件

        Raises:
            DataError: 行格式错误
        """
        templates = []
        for number, line in self.iter_lines(path):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{number} 模板行格式错误")
            try:
                template_id, match_count = int(parts[0]), int(parts[1])
            except ValueError as e:
                raise DataError(f"{path}:{number} 模板 ID 或计数不是整数") from e
            templates.append(LogTemplate(template_id, parts[2].split(" "), match_count))
        return templates

    # ==================== 整数流 ====================

    def write_int_stream(self, path: str, values: Iterable[int]) -> int:
        """每行一个整数（日志键或 0/1 标签），返回行数"""
        count = 0
        with self.open_write(path) as f:
            for value in values:
                f.write(f"{int(value)}\n")
                count += 1
        return count

    def iter_int_stream(self, path: str) -> Iterator[int]:
        """
        流式读取整数文件

        Raises:
            DataError: 非整数行
        """
        for number, line in self.iter_lines(path):
            text = line.strip()
            if not text:
                continue
            try:
                value = int(text)
            except ValueError as e:
                raise DataError(f"{path}:{number} 不是整数: {text!r}") from e
            yield value

    def read_int_stream(self, path: str) -> List[int]:
        return list(self.iter_int_stream(path))

    # ==================== 窗口 ====================

    def write_windows(self, path: str, windows: Iterable[LogWindow],
                      template_count: int) -> int:
        """
        写窗口文件：首行声明模板数，随后每行 label \\t 空格分隔的日志键（未填充）

        Returns:
            窗口数量
        """
        count = 0
        with self.open_write(path) as f:
            f.write(f"{TEMPLATE_HEADER}{template_count}\n")
            for window in windows:
                ids = " ".join(str(k) for k in window.key_ids[:window.length])
                f.write(f"{window.label}\t{ids}\n")
                count += 1
        return count

    def read_windows(self, path: str) -> Tuple[List[LogWindow], Optional[int]]:
        """
        读取窗口文件

        Returns:
            (窗口列表, 声明的模板数；缺少首行时为 None)

        Raises:
            DataError: 行格式错误
        """
        windows = []
        template_count = None
        source = os.path.basename(path)
        for number, line in self.iter_lines(path):
            if not line:
                continue
            if line.startswith(TEMPLATE_HEADER):
                value = line[len(TEMPLATE_HEADER):].strip()
                try:
                    template_count = int(value)
                except ValueError as e:
                    raise DataError(f"{path}:{number} 模板数不是整数: {value!r}") from e
                if template_count < 0:
                    raise DataError(f"{path}:{number} 模板数为负: {template_count}")
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] not in ("0", "1") or not parts[1].strip():
                raise DataError(f"{path}:{number} 窗口行格式错误")
            try:
                ids = [int(k) for k in parts[1].split()]
            except ValueError as e:
                raise DataError(f"{path}:{number} 日志键不是整数") from e
            windows.append(LogWindow(ids, int(parts[0]), origin=(source, len(windows))))
        return windows, template_count

    # ==================== 报告 ====================

    def write_history(self, path: str, history: TrainHistory):
        """训练历史报告（制表符分隔）"""
        with self.open_write(path) as f:
            f.write("\t".join(HISTORY_COLUMNS) + "\n")
            for record in history.epochs:
                m = record.val_metrics
                row = [str(record.epoch), _fmt(record.train_loss), _fmt(record.val_loss),
                       _fmt(m.accuracy), _fmt(m.precision), _fmt(m.recall),
                       _fmt(m.f1), _fmt(m.f1_w)]
                f.write("\t".join(row) + "\n")

    def write_metrics(self, path: str, loss: float, report: MetricsReport,
                      extra: Optional[Dict[str, object]] = None):
        """独立指标文件：每行 key = value"""
        with self.open_write(path) as f:
            for key, value in (extra or {}).items():
                f.write(f"{key} = {value}\n")
            f.write(f"loss = {_fmt(loss)}\n")
            for key, value in report.to_dict().items():
                f.write(f"{key} = {_fmt(value)}\n")

    def read_metrics(self, path: str) -> Dict[str, str]:
        """读取 key = value 指标文件"""
        values = {}
        for _, line in self.iter_lines(path):
            if "=" in line:
                key, value = (part.strip() for part in line.split("=", 1))
                values[key] = value
        return values

    def write_comparison(self, path: str, rows: Sequence[Dict[str, object]]):
        """多配置对比表（制表符分隔）"""
        with self.open_write(path) as f:
            f.write("\t".join(COMPARISON_COLUMNS) + "\n")
            for row in rows:
                cells = []
                for column in COMPARISON_COLUMNS:
                    value = row[column]
                    cells.append(_fmt(value) if isinstance(value, float) else str(value))
                f.write("\t".join(cells) + "\n")

    def write_text(self, path: str, text: str):
        """写纯文本（生效配置等）"""
        with self.open_write(path) as f:
            f.write(text)

    # ==================== 二进制 ====================

    def write_bytes(self, path: str, payload: bytes):
        full = self.resolve(path)
        directory = os.path.dirname(full)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(full, "wb") as f:
            f.write(payload)

    def read_bytes(self, path: str) -> bytes:
        try:
            with open(self.resolve(path), "rb") as f:
                return f.read()
        except IsADirectoryError as e:
            raise CorruptCheckpoint(f"不是文件: {path}") from e
