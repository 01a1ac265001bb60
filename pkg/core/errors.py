"""异常定义 - 用法错误与数据错误两大类。

UsageError 对应命令行退出码 1，DataError 对应退出码 2。
两者都继承 ValueError，调用方仍可按无效输入统一捕获。
"""


class LogPeftError(Exception):
    """所有工具异常的基类"""


class UsageError(LogPeftError, ValueError):
    """参数或配置用法错误"""


class DataError(LogPeftError, ValueError):
    """数据或契约错误"""


# ==================== 用法错误 ====================

class ArgumentError(UsageError):
    """参数取值非法"""


class UnknownTarget(UsageError):
    """未知的 LoRA 目标模块"""


class ConfigError(UsageError):
    """配置文件格式错误或包含未知键"""


# ==================== 数据错误 ====================

class EmptyLine(DataError):
    """日志行为空"""


class TooLong(DataError):
    """窗口长度超过填充长度"""


class ShapeMismatch(DataError):
    """张量形状不匹配"""


class EmptyMask(DataError):
    """注意力掩码全为 0"""


class NotScalar(DataError):
    """反向传播的起点不是标量"""


class IdOutOfRange(DataError):
    """日志键 ID 超出词表范围"""


class SequenceTooLong(DataError):
    """序列长度超过模型最大长度"""


class NoTrainableParams(DataError):
    """没有可训练参数"""


class EmptyDataset(DataError):
    """数据集为空"""


class EmptyBatch(DataError):
    """批次为空"""


class LengthMismatch(DataError):
    """预测与标签长度不一致"""


class EmptyInput(DataError):
    """输入为空"""


class VersionMismatch(DataError):
    """检查点格式版本不兼容"""


class CorruptCheckpoint(DataError):
    """检查点文件损坏或被截断"""


class VocabMismatch(DataError):
    """检查点绑定的模板数量与数据文件不一致"""
