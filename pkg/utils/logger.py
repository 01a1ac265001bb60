"""日志工具 - 统一的日志格式与模块级 logger。"""

import logging
import sys
from typing import Optional, TextIO


LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
ROOT_LOGGER_NAME = "logpeft"

_configured = False


def setup_logging(verbose: bool = False, stream: Optional[TextIO] = None) -> logging.Logger:
    """
    配置根 logger（只在第一次调用时添加 handler）

    Args:
        verbose: True 时输出 DEBUG 级别
        stream: 输出流，默认 stderr

    Returns:
        工具的根 logger
    """
    global _configured

    root = logging.getLogger(ROOT_LOGGER_NAME)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)

    if not _configured:
        handler = logging.StreamHandler(stream or sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
        root.propagate = False
        _configured = True

    return root


def get_logger(name: str) -> logging.Logger:
    """
    获取模块 logger，挂在工具根 logger 之下

    Args:
        name: 通常为 __name__

    Returns:
        logging.Logger
    """
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")
