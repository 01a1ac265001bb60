"""Drain 日志解析器 - 用固定深度解析树挖掘日志模板（日志键）。"""

from typing import Dict, Iterable, Iterator, List, Optional, Tuple

from core.errors import ArgumentError, EmptyLine
from utils.logger import get_logger


logger = get_logger(__name__)

WILDCARD = "<*>"


def preprocess(raw_line: str) -> List[str]:
    """
    按空白切分日志行，含数字的 token 替换为通配符

    Args:
        raw_line: 原始日志行（可为空）

    Returns:
        token 列表，空行返回 []
    """
    return [WILDCARD if any(ch.isdigit() for ch in token) else token
            for token in raw_line.split()]


class LogTemplate:
    """日志模板（日志键）"""

    def __init__(self, template_id: int, tokens: List[str], match_count: int = 1):
        """
        初始化日志模板

        Args:
            template_id: 模板ID，按首次出现顺序从0开始
            tokens: 模板 token，变量位置为通配符
            match_count: 已匹配的日志行数
        """
        self.id = template_id
        self.tokens = list(tokens)
        self.match_count = match_count

    @classmethod
    def from_dict(cls, data: Dict) -> 'LogTemplate':
        """从字典创建LogTemplate对象"""
        return cls(
            template_id=data['id'],
            tokens=data['tokens'],
            match_count=data.get('match_count', 0)
        )

    def to_dict(self) -> Dict:
        """转换为字典"""
        return {
            'id': self.id,
            'tokens': list(self.tokens),
            'match_count': self.match_count
        }

    def get_template(self) -> str:
        """模板文本（空格拼接）"""
        return " ".join(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LogTemplate):
            return NotImplemented
        return (self.id, self.tokens, self.match_count) == \
            (other.id, other.tokens, other.match_count)

    def __repr__(self) -> str:
        return f"LogTemplate({self.id}, {self.get_template()!r}, count={self.match_count})"


def similarity(tokens: List[str], template: LogTemplate) -> float:
    """
    计算日志 token 与模板的相似度

    通配符位置不计入分子，分母为完整长度。

    Args:
        tokens: 预处理后的 token
        template: 候选模板（长度必须相同）

    Returns:
        [0, 1] 之间的相似度
    """
    template_tokens = template.tokens
    if len(tokens) != len(template_tokens) or not tokens:
        raise ArgumentError(f"长度不一致: {len(tokens)} != {len(template_tokens)}")

    same = sum(1 for token, template_token in zip(tokens, template_tokens)
               if template_token != WILDCARD and token == template_token)
    return same / len(tokens)


class Node:
    """解析树节点"""

    def __init__(self):
        self.children: Dict[str, 'Node'] = {}
        self.wildcard_child: Optional['Node'] = None
        self.templates: List[LogTemplate] = []  # 仅叶子节点使用

    def get_wildcard_child(self) -> 'Node':
        """取得（必要时创建）兜底通配子节点"""
        if self.wildcard_child is None:
            self.wildcard_child = Node()
        return self.wildcard_child


class DrainTree:
    """固定深度的 Drain 解析树"""

    DEFAULT_DEPTH = 4
    DEFAULT_SIM_THRESHOLD = 0.5
    DEFAULT_MAX_CHILDREN = 100

    def __init__(self, depth: int = DEFAULT_DEPTH,
                 sim_threshold: float = DEFAULT_SIM_THRESHOLD,
                 max_children: int = DEFAULT_MAX_CHILDREN):
        """
        初始化解析树

        Args:
            depth: 按前导 token 划分的内部层数
            sim_threshold: 合并阈值，取值 (0, 1]
            max_children: 每个内部节点的具体 token 子节点上限

        Raises:
            ArgumentError: 参数超出范围
        """
        if depth < 1:
            raise ArgumentError(f"depth 必须为正整数: {depth}")
        if not 0.0 < sim_threshold <= 1.0:
            raise ArgumentError(f"sim_threshold 必须在 (0, 1] 内: {sim_threshold}")
        if max_children < 1:
            raise ArgumentError(f"max_children 必须为正整数: {max_children}")

        self.depth = depth
        self.sim_threshold = sim_threshold
        self.max_children = max_children

        self._length_nodes: Dict[int, Node] = {}
        self._templates: List[LogTemplate] = []

    @property
    def template_count(self) -> int:
        """已挖掘的模板数量"""
        return len(self._templates)

    def _descend(self, tokens: List[str]) -> Node:
        """先按 token 数，再按前 depth 个 token 下行到叶子"""
        node = self._length_nodes.get(len(tokens))
        if node is None:
            node = Node()
            self._length_nodes[len(tokens)] = node

        for token in tokens[:self.depth]:
            if WILDCARD in token:
                node = node.get_wildcard_child()
            elif token in node.children:
                node = node.children[token]
            elif len(node.children) < self.max_children:
                child = Node()
                node.children[token] = child
                node = child
            else:
                node = node.get_wildcard_child()

        return node

    def parse_line(self, raw_line: str) -> Tuple[int, LogTemplate]:
        """
        解析一行日志，返回日志键及其模板

        Args:
            raw_line: 原始日志行

        Returns:
            (key_id, template)

        Raises:
            EmptyLine: 预处理后为空
        """
        tokens = preprocess(raw_line)
        if not tokens:
            raise EmptyLine("日志内容不能为空")

        leaf = self._descend(tokens)

        # 完全一致的模板直接命中（含全通配模板）
        for template in leaf.templates:
            if template.tokens == tokens:
                template.match_count += 1
                return template.id, template

        best: Optional[LogTemplate] = None
        best_sim = -1.0
        for template in leaf.templates:  # 叶内按 ID 升序，平局取最小 ID
            sim = similarity(tokens, template)
            if sim > best_sim:
                best, best_sim = template, sim

        if best is not None and best_sim >= self.sim_threshold:
            best.tokens = [t if t == token else WILDCARD
                           for t, token in zip(best.tokens, tokens)]
            best.match_count += 1
            return best.id, best

        template = LogTemplate(len(self._templates), tokens, match_count=1)
        self._templates.append(template)
        leaf.templates.append(template)
        logger.debug("新模板 %d: %s", template.id, template.get_template())
        return template.id, template

    def parse_lines(self, lines: Iterable[str]) -> Iterator[int]:
        """
        流式解析，逐行产出日志键（空行跳过）

        Args:
            lines: 日志行迭代器

        Yields:
            日志键ID
        """
        skipped = 0
        for line in lines:
            try:
                key_id, _ = self.parse_line(line)
            except EmptyLine:
                skipped += 1
                continue
            yield key_id

        if skipped:
            logger.warning("跳过 %d 条空日志行", skipped)

    def export_templates(self) -> List[LogTemplate]:
        """
        导出全部模板（按ID排序的副本）

        Returns:
            模板列表
        """
        return [LogTemplate(t.id, t.tokens, t.match_count) for t in self._templates]

    def max_path_length(self) -> int:
        """最长的根到叶路径节点数（长度节点 + token 节点 + 叶子）"""
        def walk(node: Node) -> int:
            children = list(node.children.values())
            if node.wildcard_child is not None:
                children.append(node.wildcard_child)
            if not children:
                return 1
            return 1 + max(walk(child) for child in children)

        if not self._length_nodes:
            return 0
        # 叶子本身即最深的 token 节点所挂的模板组
        return max(walk(node) for node in self._length_nodes.values()) + 1


def parse_line(tree: DrainTree, raw_line: str) -> Tuple[int, LogTemplate]:
    """解析单行日志（DrainTree.parse_line 的函数形式）"""
    return tree.parse_line(raw_line)


def export_templates(tree: DrainTree) -> List[LogTemplate]:
    """导出模板（DrainTree.export_templates 的函数形式）"""
    return tree.export_templates()
