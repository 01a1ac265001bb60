"""日志与随机数工具。"""
