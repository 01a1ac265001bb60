#!/usr/bin/env python3
"""日志异常检测工具 - 命令行启动器"""

import sys

from cli import run


def main():
    """主函数"""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
