"""文件格式与检查点。"""
