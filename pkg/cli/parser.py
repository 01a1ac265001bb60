"""命令行参数定义 - 子命令与配置字段一一对应。"""

import argparse
from typing import Dict, List, Optional, Tuple

from core.errors import ArgumentError


PROG = "logpeft"

# 不属于 RunConfig 的参数
CONTROL_DESTS = ("command", "config", "verbose")


class CliArgumentParser(argparse.ArgumentParser):
    """解析失败时抛出 ArgumentError 而不是直接退出"""

    def error(self, message: str):
        raise ArgumentError(f"{self.prog}: {message}")


def _option(parser: argparse.ArgumentParser, flag: str, dest: str, kind=str, help_text: str = ""):
    """配置字段对应的参数，未给出时不出现在结果中"""
    parser.add_argument(flag, dest=dest, type=kind, default=argparse.SUPPRESS, help=help_text)


def _switch(parser: argparse.ArgumentParser, flag: str, dest: str, help_text: str = ""):
    parser.add_argument(flag, dest=dest, action="store_true",
                        default=argparse.SUPPRESS, help=help_text)


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="key = value 配置文件（也可用 LOGPEFT_CONFIG）")
    parser.add_argument("--verbose", "-v", action="store_true", help="输出调试日志")


def _model_options(parser: argparse.ArgumentParser):
    _option(parser, "--d-model", "d_model", int, "隐藏维度")
    _option(parser, "--heads", "n_heads", int, "注意力头数")
    _option(parser, "--layers", "n_layers", int, "解码器层数")
    _option(parser, "--max-len", "max_len", int, "最大序列长度")
    _option(parser, "--ffn-dim", "ffn_dim", int, "前馈层宽度（0 表示 4d）")
    _option(parser, "--init-std", "init_std", float, "初始化标准差")


def _peft_options(parser: argparse.ArgumentParser):
    _option(parser, "--targets", "targets", str, "LoRA 目标模块，逗号分隔")
    _option(parser, "--target-layers", "target_layers", str, "LoRA 目标层（从 1 计），逗号分隔")
    _option(parser, "--rank", "rank", int, "LoRA 秩 r")
    _option(parser, "--alpha", "alpha", float, "LoRA 缩放 α")
    _option(parser, "--dropout", "lora_dropout", float, "LoRA dropout")
    _option(parser, "--lora-init-std", "lora_init_std", float, "LoRA A 的初始化标准差")
    _switch(parser, "--scale-by-rank", "scale_by_rank", "使用 α/r 缩放")


def _train_options(parser: argparse.ArgumentParser):
    _option(parser, "--lr", "lr", float, "学习率")
    _option(parser, "--batch", "batch_size", int, "批大小")
    _option(parser, "--epochs", "epochs", int, "训练轮数")
    _option(parser, "--weight-decay", "weight_decay", float, "AdamW 权重衰减")
    _option(parser, "--class-weights", "class_weights", str, "auto 或 'w0,w1'")
    _option(parser, "--train-frac", "train_frac", float, "训练集比例")
    _option(parser, "--val-frac", "val_frac", float, "验证集比例")
    _option(parser, "--seed", "seed", int, "随机种子")


def build_parser() -> CliArgumentParser:
    """构造完整的命令行解析器"""
    parser = CliArgumentParser(prog=PROG, description="基于 PEFT 的日志异常检测工具")
    subparsers = parser.add_subparsers(dest="command", parser_class=CliArgumentParser)

    parse = subparsers.add_parser("parse", help="用 Drain 把原始日志解析为日志键流")
    _common(parse)
    _option(parse, "--logs", "logs", str, "原始日志文件")
    _option(parse, "--depth", "depth", int, "解析树深度")
    _option(parse, "--sim-threshold", "sim_threshold", float, "相似度阈值")
    _option(parse, "--max-children", "max_children", int, "每个节点的子节点上限")
    _option(parse, "--templates-out", "templates_out", str, "模板输出文件")
    _option(parse, "--keys-out", "keys_out", str, "日志键输出文件")
    _option(parse, "--labels-out", "labels_out", str, "标签输出文件")
    _switch(parse, "--plain", "plain", "日志不含标签列")

    windows = subparsers.add_parser("windows", help="把日志键流切分为定长窗口")
    _common(windows)
    _option(windows, "--keys", "keys", str, "日志键文件")
    _option(windows, "--labels", "labels", str, "标签文件")
    _option(windows, "--templates", "templates", str, "模板文件（决定词表大小）")
    _option(windows, "--size", "window_size", int, "窗口长度")
    _option(windows, "--stride", "stride", int, "步长")
    _option(windows, "--out", "out", str, "窗口输出文件")

    synth = subparsers.add_parser("synth", help="生成 Thunderbird 格式的合成日志")
    _common(synth)
    _option(synth, "--vocab", "synth_vocab", int, "日志键数量")
    _option(synth, "--normal-patterns", "synth_normal_patterns", int, "正常模式数")
    _option(synth, "--anomaly-patterns", "synth_anomaly_patterns", int, "异常模式数")
    _option(synth, "--rate", "synth_rate", float, "异常行比例")
    _option(synth, "--lines", "synth_lines", int, "行数")
    _option(synth, "--burst", "synth_burst", int, "一次故障的异常片段数")
    _option(synth, "--seed", "seed", int, "随机种子")
    _option(synth, "--out", "out", str, "日志输出文件")
    _option(synth, "--keys-out", "keys_out", str, "真实日志键输出文件")
    _option(synth, "--labels-out", "labels_out", str, "真实标签输出文件")

    train = subparsers.add_parser("train", help="微调并保存检查点")
    _common(train)
    _option(train, "--method", "method", str, "lora / adapter / full")
    _model_options(train)
    _peft_options(train)
    _train_options(train)
    _option(train, "--data", "data", str, "窗口文件")
    _option(train, "--checkpoint-out", "checkpoint_out", str, "检查点输出文件")
    _option(train, "--report-out", "report_out", str, "训练历史报告")

    evaluate = subparsers.add_parser("eval", help="用检查点评估窗口文件")
    _common(evaluate)
    _option(evaluate, "--checkpoint", "checkpoint", str, "检查点文件")
    _option(evaluate, "--data", "data", str, "窗口文件")
    _option(evaluate, "--split", "eval_split", str, "test 或 all")
    _option(evaluate, "--report-out", "report_out", str, "指标输出文件")

    sweep = subparsers.add_parser("sweep", help="对比不同目标模块组合与适配器方法")
    _common(sweep)
    _model_options(sweep)
    _peft_options(sweep)
    _train_options(sweep)
    _option(sweep, "--data", "data", str, "窗口文件")
    _option(sweep, "--out", "out", str, "对比表输出文件")

    return parser


def split_namespace(namespace: argparse.Namespace) -> Tuple[str, Dict[str, object], Dict[str, object]]:
    """
    拆分解析结果

    Returns:
        (子命令, 控制参数, 配置覆盖项)
    """
    values = vars(namespace)
    control = {key: values.get(key) for key in CONTROL_DESTS}
    overrides = {key: value for key, value in values.items() if key not in CONTROL_DESTS}
    return control["command"], control, overrides


def parse_arguments(argv: List[str], parser: Optional[CliArgumentParser] = None
                    ) -> Tuple[str, Dict[str, object], Dict[str, object]]:
    """
    解析命令行

    Raises:
        ArgumentError: 参数无效或缺少子命令
    """
    command, control, overrides = split_namespace((parser or build_parser()).parse_args(argv))
    if not command:
        raise ArgumentError("缺少子命令")
    return command, control, overrides
