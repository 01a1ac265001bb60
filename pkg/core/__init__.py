"""核心算法：日志解析、序列构造、模型与训练。"""
