"""子命令实现 - parse / windows / synth / train / eval / sweep。"""

import contextlib
import os
import sys
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from cli.parser import build_parser, parse_arguments
from config import Config, RunConfig
from core.errors import (ArgumentError, DataError, EmptyDataset, EmptyLine, IdOutOfRange,
                         SequenceTooLong, UsageError, VocabMismatch)
from core.peft import attach_adapter_head, inject_lora, trainable_parameter_report, unfreeze_all
from core.sequencer import (LabeledLine, LogWindow, generate_synthetic, iter_windows,
                            pad_and_mask, read_labeled_line, render_log_line, split_dataset)
from core.trainer import Trainer, evaluate, inverse_frequency_weights, steps_per_epoch
from core.transformer import TransformerModel
from data.checkpoint import load_checkpoint, save_checkpoint
from data.storage import Storage
from utils.logger import get_logger, setup_logging


logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

PROGRESS_EVERY = 1_000_000
EVAL_SPLITS = ("test", "all")
CONFIG_SUFFIX = ".config"

# (名称, 方法, 目标模块)
SWEEP_RUNS = (
    ("k_proj", "lora", "k_proj"),
    ("k_proj+v_proj", "lora", "k_proj,v_proj"),
    ("q_proj+k_proj+v_proj", "lora", "q_proj,k_proj,v_proj"),
    ("adapter", "adapter", "k_proj"),
)


def _require(config: RunConfig, *names: str):
    """检查必需的路径配置"""
    missing = [name for name in names if not getattr(config, name)]
    if missing:
        flags = ", ".join("--" + name.replace("_", "-") for name in missing)
        raise ArgumentError(f"缺少必需参数: {flags}")


def _write_effective_config(storage: Storage, output: str, config: RunConfig):
    """生效配置写在主输出旁边"""
    storage.write_text(output + CONFIG_SUFFIX, config.to_text())


# ==================== 数据集 ====================

def load_dataset(config: RunConfig, storage: Storage,
                 template_count: Optional[int] = None) -> Tuple[List[LogWindow], int]:
    """
    读取窗口文件并填充到最长窗口

    Args:
        config: 运行配置（使用 data 路径）
        storage: 存储
        template_count: 期望的模板数（来自检查点），None 表示以文件为准

    Returns:
        (填充后的窗口, 模板数)

    Raises:
        EmptyDataset: 文件中没有窗口
        VocabMismatch: 文件声明的模板数与期望不符
        IdOutOfRange: 日志键超出模板数
    """
    windows, declared = storage.read_windows(config.data)
    if not windows:
        raise EmptyDataset(f"窗口文件为空: {config.data}")

    if declared is not None and template_count is not None and declared != template_count:
        raise VocabMismatch(f"窗口文件声明 {declared} 个模板，检查点绑定 {template_count} 个")
    count = template_count if template_count is not None else declared
    if count is None:
        count = max(max(w.key_ids) for w in windows) + 1

    if any(k < 0 or k >= count for w in windows for k in w.key_ids):
        raise IdOutOfRange(f"窗口中的日志键超出 [0, {count})")

    longest = max(len(w.key_ids) for w in windows)
    return [pad_and_mask(w, longest, count) for w in windows], count


def class_weights_for(config: RunConfig, train_set: Sequence[LogWindow]) -> Tuple[float, float]:
    """训练时使用的类别权重（验证与评估沿用）"""
    return config.class_weight_pair() or inverse_frequency_weights([w.label for w in train_set])


def build_base_model(config: RunConfig, template_count: int,
                     windows: Sequence[LogWindow]) -> TransformerModel:
    """按数据的词表大小初始化主干"""
    structure = config.transformer_config(template_count + 1, template_count)
    longest = len(windows[0].key_ids)
    if longest > structure.max_len:
        raise SequenceTooLong(f"窗口长度 {longest} 超过 max_len={structure.max_len}")
    return TransformerModel.initialize(structure, config.seed)


def prepare_model(base: TransformerModel, config: RunConfig) -> TransformerModel:
    """按训练方法设置冻结标记与 PEFT 组件"""
    if config.method == "lora":
        return inject_lora(base, config.lora_config(), config.seed)
    if config.method == "adapter":
        return attach_adapter_head(base, config.seed)
    if config.method == "full":
        return unfreeze_all(base)
    raise ArgumentError(f"未知的训练方法: {config.method}")


# ==================== 子命令 ====================

def cmd_parse(config: RunConfig, overrides: Mapping[str, object], storage: Storage) -> int:
    """流式解析原始日志，输出模板、日志键流与标签流"""
    _require(config, "logs", "templates_out", "keys_out")
    tree = config.drain_tree()

    n_lines = n_anomalous = skipped = 0
    with contextlib.ExitStack() as stack:
        logs = stack.enter_context(
            open(storage.resolve(config.logs), "r", encoding="utf-8", errors="replace"))
        keys_out = stack.enter_context(storage.open_write(config.keys_out))
        labels_out = stack.enter_context(storage.open_write(config.labels_out)) \
            if config.labels_out else None

        for raw in logs:
            try:
                line = LabeledLine(False, raw.strip()) if config.plain else read_labeled_line(raw)
                key_id, _ = tree.parse_line(line.message)
            except EmptyLine:
                skipped += 1
                continue

            keys_out.write(f"{key_id}\n")
            if labels_out is not None:
                labels_out.write("1\n" if line.is_anomalous else "0\n")
            n_lines += 1
            n_anomalous += line.is_anomalous
            if n_lines % PROGRESS_EVERY == 0:
                logger.info("已解析 %d 行，模板 %d 个", n_lines, tree.template_count)

    if skipped:
        logger.warning("跳过 %d 条空日志行", skipped)
    storage.write_templates(config.templates_out, tree.export_templates())
    _write_effective_config(storage, config.keys_out, config)

    print(f"✅ 解析完成: {n_lines} 行, {tree.template_count} 个模板, {n_anomalous} 行异常")
    return EXIT_OK


def cmd_windows(config: RunConfig, overrides: Mapping[str, object], storage: Storage) -> int:
    """日志键流 + 标签流 → 窗口文件（流式，只缓存一个窗口）"""
    _require(config, "keys", "labels", "out")
    if config.templates:
        template_count = len(storage.read_templates(config.templates))
    else:
        template_count = max(storage.iter_int_stream(config.keys), default=-1) + 1

    def checked_keys():
        for key in storage.iter_int_stream(config.keys):
            if key < 0 or key >= template_count:
                raise IdOutOfRange(f"日志键 {key} 超出模板数 {template_count}")
            yield key

    flags = (label != 0 for label in storage.iter_int_stream(config.labels))
    n_anomalous = 0

    def counted(windows):
        nonlocal n_anomalous
        for window in windows:
            n_anomalous += window.label
            yield window

    windows = iter_windows(checked_keys(), flags, config.window_size, config.stride,
                           source_id=os.path.basename(config.keys))
    n_windows = storage.write_windows(config.out, counted(windows), template_count)
    if not n_windows:
        logger.warning("日志键数少于窗口长度 %d，没有生成窗口", config.window_size)
    _write_effective_config(storage, config.out, config)

    print(f"✅ 生成 {n_windows} 个窗口（异常 {n_anomalous} 个），模板数 {template_count}")
    return EXIT_OK


def cmd_synth(config: RunConfig, overrides: Mapping[str, object], storage: Storage) -> int:
    """生成 Thunderbird 格式的合成日志"""
    _require(config, "out")
    keys, flags = generate_synthetic(config.synth_spec(), config.seed)

    with storage.open_write(config.out) as f:
        for line_no, (key, flag) in enumerate(zip(keys, flags)):
            f.write(render_log_line(key, flag, line_no) + "\n")
    if config.keys_out:
        storage.write_int_stream(config.keys_out, keys)
    if config.labels_out:
        storage.write_int_stream(config.labels_out, (int(f) for f in flags))
    _write_effective_config(storage, config.out, config)

    print(f"✅ 合成 {len(keys)} 行日志，异常 {sum(flags)} 行")
    return EXIT_OK


def cmd_train(config: RunConfig, overrides: Mapping[str, object], storage: Storage) -> int:
    """微调：划分数据 → 准备模型 → 训练 → 保存检查点与历史"""
    _require(config, "data", "checkpoint_out", "report_out")
    train_config = config.train_config()
    train_config.validate()
    if config.method == "lora":
        config.lora_config()  # 读数据前校验目标模块

    windows, template_count = load_dataset(config, storage)
    train_set, val_set, _ = split_dataset(windows, config.train_frac, config.val_frac, config.seed)
    model = prepare_model(build_base_model(config, template_count, windows), config)

    report = trainable_parameter_report(model)
    logger.info("可训练参数 %d / %d（%.4f%%），每轮 %d 步", report.trainable, report.total,
                100.0 * report.trainable_ratio,
                steps_per_epoch(len(train_set), train_config.batch_size))

    history = Trainer(model, train_config).train(train_set, val_set)
    save_checkpoint(model, config, config.checkpoint_out, template_count, storage)
    storage.write_history(config.report_out, history)
    _write_effective_config(storage, config.checkpoint_out, config)

    final = history.epochs[-1] if history.epochs else None
    print(f"✅ 训练完成: method={config.method}, 可训练参数 {report.trainable}/{report.total}")
    if final is not None:
        print(f"   初始损失 {history.initial_train_loss:.6f} → 最终损失 {final.train_loss:.6f}, "
              f"验证 F1 {final.val_metrics.f1:.4f}")
    return EXIT_OK


def cmd_eval(config: RunConfig, overrides: Mapping[str, object], storage: Storage) -> int:
    """用检查点评估窗口文件，输出 key = value 指标"""
    _require(config, "checkpoint", "data", "report_out")
    checkpoint = load_checkpoint(config.checkpoint, storage)
    # 以检查点里的配置为基准，路径与划分取本次调用
    paths = {key: getattr(config, key) for key in ("checkpoint", "data", "report_out", "eval_split")}
    config = checkpoint.config.with_overrides({**paths, **overrides})
    if config.eval_split not in EVAL_SPLITS:
        raise ArgumentError(f"--split 只能是 {' / '.join(EVAL_SPLITS)}: {config.eval_split}")

    windows, template_count = load_dataset(config, storage, checkpoint.template_count)
    if checkpoint.vocab_size != template_count + 1:
        raise VocabMismatch(f"检查点词表 {checkpoint.vocab_size} 与模板数 {template_count} 不符")

    train_set, _, test_set = split_dataset(windows, config.train_frac, config.val_frac, config.seed)
    subset = test_set if config.eval_split == "test" else windows
    if not subset:
        raise EmptyDataset(f"{config.eval_split} 划分为空")

    loss, metrics = evaluate(checkpoint.model, subset, class_weights_for(config, train_set))
    storage.write_metrics(config.report_out, loss, metrics,
                          extra={"split": config.eval_split, "windows": len(subset)})
    _write_effective_config(storage, config.report_out, config)

    print(f"✅ 评估完成（{config.eval_split}, {len(subset)} 个窗口）: loss={loss:.6f} "
          f"acc={metrics.accuracy:.4f} P={metrics.precision:.4f} "
          f"R={metrics.recall:.4f} F1={metrics.f1:.4f}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, overrides: Mapping[str, object], storage: Storage) -> int:
    """同一划分与种子下对比不同目标模块组合和适配器方法"""
    _require(config, "data", "out")
    windows, template_count = load_dataset(config, storage)
    train_set, val_set, test_set = split_dataset(windows, config.train_frac, config.val_frac,
                                                 config.seed)
    held_out = test_set or val_set
    weights = class_weights_for(config, train_set)

    rows: List[Dict[str, object]] = []
    for name, method, targets in SWEEP_RUNS:
        run_config = config.with_overrides({"method": method, "targets": targets})
        model = prepare_model(build_base_model(run_config, template_count, windows), run_config)
        report = trainable_parameter_report(model)
        logger.info("sweep %s: 可训练参数 %d", name, report.trainable)

        Trainer(model, run_config.train_config()).train(train_set, val_set)
        loss, metrics = evaluate(model, held_out, weights)
        rows.append({
            "config": name,
            "trainable": report.trainable,
            "total": report.total,
            "loss": loss,
            "accuracy": metrics.accuracy,
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f1": metrics.f1,
            "f1_weighted": metrics.f1_w,
        })
        print(f"   {name:<22} trainable={report.trainable:<8} F1={metrics.f1:.4f}")

    storage.write_comparison(config.out, rows)
    _write_effective_config(storage, config.out, config)
    print(f"✅ 对比完成: {len(rows)} 组配置 → {config.out}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, Mapping[str, object], Storage], int]] = {
    "parse": cmd_parse,
    "windows": cmd_windows,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def run(argv: Optional[Sequence[str]] = None, storage: Optional[Storage] = None) -> int:
    """
    命令行入口

    Args:
        argv: 参数列表（不含程序名），默认取 sys.argv
        storage: 文件存储，默认以当前目录为基准

    Returns:
        退出码：0 成功，1 用法错误，2 数据错误
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE

    try:
        command, control, overrides = parse_arguments(argv, parser)
        setup_logging(bool(control["verbose"]))
        config = Config.resolve(overrides, control["config"])
        return COMMANDS[command](config, overrides, storage or Storage())
    except UsageError as e:
        print(f"❌ 参数错误: {e}", file=sys.stderr)
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"❌ 数据错误: {e}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as e:
        # --help
        return int(e.code or 0)
