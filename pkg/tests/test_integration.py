"""集成测试 - 测试完整的命令行工作流程。"""

import pytest
import os

import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cli import run
from cli.commands import EXIT_DATA, EXIT_OK, EXIT_USAGE
from config import Config, RunConfig
from data.checkpoint import load_checkpoint
from data.storage import Storage


FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")

SMALL_MODEL = ["--d-model", "16", "--heads", "2", "--layers", "1", "--max-len", "16"]
SMALL_TRAIN = ["--epochs", "1", "--batch", "8", "--lr", "0.001", "--seed", "3"]


@pytest.fixture
def storage(tmp_path, monkeypatch):
    monkeypatch.delenv(Config.CONFIG_ENV, raising=False)
    return Storage(str(tmp_path))


def read(tmp_path, name):
    return (tmp_path / name).read_text(encoding="utf-8")


def prepare_windows(storage):
    """synth → parse → windows，返回窗口文件名"""
    assert run(["synth", "--vocab", "16", "--lines", "1600", "--seed", "5",
                "--out", "raw.log"], storage) == EXIT_OK
    assert run(["parse", "--logs", "raw.log", "--templates-out", "templates.tsv",
                "--keys-out", "keys.txt", "--labels-out", "labels.txt"], storage) == EXIT_OK
    assert run(["windows", "--keys", "keys.txt", "--labels", "labels.txt",
                "--templates", "templates.tsv", "--size", "16", "--stride", "16",
                "--out", "windows.txt"], storage) == EXIT_OK
    return "windows.txt"


def train_args(data, checkpoint="model.ckpt", report="history.tsv", *extra):
    return (["train", "--method", "lora", "--targets", "k_proj", "--data", data,
             "--checkpoint-out", checkpoint, "--report-out", report]
            + SMALL_MODEL + SMALL_TRAIN + list(extra))


class TestUsageErrors:
    """用法错误测试类"""

    def test_no_arguments(self, storage, capsys):
        """测试没有参数时打印用法并返回 1"""
        assert run([], storage) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_target(self, storage):
        """测试未知目标模块在读取数据前报错"""
        assert run(["train", "--targets", "x_proj", "--data", "missing.txt",
                    "--checkpoint-out", "m.ckpt", "--report-out", "r.tsv"], storage) == EXIT_USAGE

    def test_unknown_option(self, storage):
        """测试未知参数"""
        assert run(["train", "--bogus", "1"], storage) == EXIT_USAGE

    def test_unknown_command(self, storage):
        """测试未知子命令"""
        assert run(["finetune"], storage) == EXIT_USAGE

    def test_missing_required(self, storage):
        """测试缺少必需路径"""
        assert run(["windows", "--keys", "k.txt"], storage) == EXIT_USAGE

    def test_bad_type(self, storage):
        """测试参数类型错误"""
        assert run(["synth", "--lines", "many", "--out", "x.log"], storage) == EXIT_USAGE

    def test_unknown_config_key(self, storage, tmp_path):
        """测试配置文件含未知键"""
        path = tmp_path / "bad.config"
        path.write_text("speed = fast\n")
        assert run(["synth", "--config", str(path), "--out", "x.log"], storage) == EXIT_USAGE

    def test_help(self, storage):
        """测试 --help 正常退出"""
        assert run(["train", "--help"], storage) == EXIT_OK


class TestDataErrors:
    """数据错误测试类"""

    def test_missing_file(self, storage):
        """测试输入文件不存在"""
        assert run(["parse", "--logs", "missing.log", "--templates-out", "t.tsv",
                    "--keys-out", "k.txt"], storage) == EXIT_DATA

    def test_missing_checkpoint(self, storage, tmp_path):
        """测试检查点不存在"""
        (tmp_path / "w.txt").write_text("# templates=2\n0\t0 1\n")
        assert run(["eval", "--checkpoint", "missing.ckpt", "--data", "w.txt",
                    "--report-out", "m.txt"], storage) == EXIT_DATA

    def test_empty_windows(self, storage, tmp_path):
        """测试窗口文件为空"""
        (tmp_path / "w.txt").write_text("# templates=4\n")
        assert run(train_args("w.txt"), storage) == EXIT_DATA

    def test_key_out_of_range(self, storage, tmp_path):
        """测试日志键超出声明的模板数"""
        (tmp_path / "w.txt").write_text("# templates=2\n" + "0\t0 1 5\n" * 10)
        assert run(train_args("w.txt"), storage) == EXIT_DATA

    def test_window_longer_than_model(self, storage, tmp_path):
        """测试窗口长度超过 max_len"""
        row = "0\t" + " ".join(["1"] * 20) + "\n"
        (tmp_path / "w.txt").write_text("# templates=2\n" + row * 10)
        assert run(train_args("w.txt"), storage) == EXIT_DATA

    def test_corrupt_checkpoint(self, storage, tmp_path):
        """测试损坏的检查点"""
        (tmp_path / "bad.ckpt").write_bytes(b"LOGPEFT\x00garbage")
        (tmp_path / "w.txt").write_text("# templates=2\n0\t0 1\n")
        assert run(["eval", "--checkpoint", "bad.ckpt", "--data", "w.txt",
                    "--report-out", "m.txt"], storage) == EXIT_DATA


class TestParseCommand:
    """parse 子命令测试类"""

    def test_fixture_corpus(self, storage, tmp_path):
        """测试固定语料的命令行解析结果"""
        assert run(["parse", "--logs", os.path.join(FIXTURES, "drain_corpus.log"),
                    "--templates-out", "templates.tsv", "--keys-out", "keys.txt",
                    "--labels-out", "labels.txt"], storage) == EXIT_OK

        expected = Storage(FIXTURES)
        assert read(tmp_path, "templates.tsv") == \
            open(expected.resolve("drain_expected_templates.tsv"), encoding="utf-8").read()
        assert storage.read_int_stream("keys.txt") == \
            expected.read_int_stream("drain_expected_keys.txt")
        assert storage.read_int_stream("labels.txt") == \
            expected.read_int_stream("drain_expected_labels.txt")

    def test_effective_config_written(self, storage, tmp_path):
        """测试生效配置写在日志键文件旁边"""
        assert run(["parse", "--logs", os.path.join(FIXTURES, "drain_corpus.log"),
                    "--templates-out", "t.tsv", "--keys-out", "keys.txt",
                    "--sim-threshold", "0.6"], storage) == EXIT_OK
        config = RunConfig.from_file(str(tmp_path / "keys.txt.config"))
        assert config.sim_threshold == 0.6
        assert not (tmp_path / "labels.txt").exists()

    def test_plain_mode(self, storage, tmp_path):
        """测试无标签列的日志"""
        (tmp_path / "plain.log").write_text("link state changed to down for alpha\n"
                                            "link state changed to down for beta\n\n")
        assert run(["parse", "--plain", "--logs", "plain.log", "--templates-out", "t.tsv",
                    "--keys-out", "k.txt", "--labels-out", "l.txt"], storage) == EXIT_OK
        assert storage.read_int_stream("k.txt") == [0, 0]
        assert storage.read_int_stream("l.txt") == [0, 0]
        (template,) = storage.read_templates("t.tsv")
        assert template.tokens[0] == "link"
        assert template.tokens[-1] == "<*>"


class TestWindowsCommand:
    """windows 子命令测试类"""

    def test_windows_from_streams(self, storage, tmp_path):
        """测试由日志键流和标签流生成窗口"""
        storage.write_int_stream("k.txt", [0, 1, 2, 0, 1, 2, 0, 1])
        storage.write_int_stream("l.txt", [0, 0, 0, 0, 1, 0, 0, 0])
        assert run(["windows", "--keys", "k.txt", "--labels", "l.txt", "--size", "4",
                    "--stride", "4", "--out", "w.txt"], storage) == EXIT_OK

        windows, count = storage.read_windows("w.txt")
        assert count == 3
        assert [w.label for w in windows] == [0, 1]
        assert (tmp_path / "w.txt.config").exists()

    def test_keys_beyond_templates(self, storage, tmp_path):
        """测试日志键超出模板文件"""
        storage.write_int_stream("k.txt", [0, 7])
        storage.write_int_stream("l.txt", [0, 0])
        (tmp_path / "t.tsv").write_text("0\t1\ta b\n")
        assert run(["windows", "--keys", "k.txt", "--labels", "l.txt", "--templates", "t.tsv",
                    "--size", "2", "--stride", "1", "--out", "w.txt"], storage) == EXIT_DATA


class TestPipeline:
    """完整流程测试类"""

    def test_full_pipeline(self, storage, tmp_path):
        """测试 synth → parse → windows → train → eval"""
        data = prepare_windows(storage)
        windows, template_count = storage.read_windows(data)
        assert len(windows) == 100
        assert template_count == len(storage.read_templates("templates.tsv"))

        assert run(train_args(data), storage) == EXIT_OK
        assert (tmp_path / "model.ckpt").exists()
        assert read(tmp_path, "history.tsv").splitlines()[0].startswith("epoch\t")
        assert len(read(tmp_path, "history.tsv").splitlines()) == 2

        checkpoint = load_checkpoint("model.ckpt", storage)
        assert checkpoint.template_count == template_count
        assert checkpoint.vocab_size == template_count + 1
        assert checkpoint.config.method == "lora"
        assert len(checkpoint.model.lora) == 2

        assert run(["eval", "--checkpoint", "model.ckpt", "--data", data,
                    "--report-out", "metrics.txt"], storage) == EXIT_OK
        metrics = storage.read_metrics("metrics.txt")
        assert metrics["split"] == "test"
        assert int(metrics["windows"]) == 10
        assert 0.0 <= float(metrics["f1"]) <= 1.0

        assert run(["eval", "--checkpoint", "model.ckpt", "--data", data, "--split", "all",
                    "--report-out", "all.txt"], storage) == EXIT_OK
        assert int(storage.read_metrics("all.txt")["windows"]) == 100

    def test_adapter_and_full_methods(self, storage, tmp_path):
        """测试适配器与全量微调方法"""
        data = prepare_windows(storage)
        for method in ("adapter", "full"):
            args = train_args(data, f"{method}.ckpt", f"{method}.tsv")
            args[args.index("lora")] = method
            assert run(args, storage) == EXIT_OK
            checkpoint = load_checkpoint(f"{method}.ckpt", storage)
            assert checkpoint.config.method == method
            assert not checkpoint.model.lora

        assert load_checkpoint("adapter.ckpt", storage).model.adapter_head is not None

    def test_deterministic(self, storage, tmp_path):
        """测试相同种子两次运行得到逐字节相同的检查点与报告"""
        outputs = []
        for _ in range(2):
            data = prepare_windows(storage)
            assert run(train_args(data), storage) == EXIT_OK
            assert run(["eval", "--checkpoint", "model.ckpt", "--data", data,
                        "--report-out", "metrics.txt"], storage) == EXIT_OK
            outputs.append({name: (tmp_path / name).read_bytes()
                            for name in ("raw.log", "keys.txt", "windows.txt", "model.ckpt",
                                         "history.tsv", "metrics.txt")})
        assert outputs[0] == outputs[1]

    def test_eval_vocab_mismatch(self, storage, tmp_path):
        """测试评估数据的模板数与检查点不一致"""
        data = prepare_windows(storage)
        assert run(train_args(data), storage) == EXIT_OK
        (tmp_path / "other.txt").write_text("# templates=3\n" + "1\t0 1 2\n" * 5)
        assert run(["eval", "--checkpoint", "model.ckpt", "--data", "other.txt",
                    "--report-out", "m.txt"], storage) == EXIT_DATA

    def test_eval_bad_split(self, storage):
        """测试无效的评估划分"""
        data = prepare_windows(storage)
        assert run(train_args(data), storage) == EXIT_OK
        assert run(["eval", "--checkpoint", "model.ckpt", "--data", data, "--split", "val",
                    "--report-out", "m.txt"], storage) == EXIT_USAGE

    def test_config_file_precedence(self, storage, tmp_path):
        """测试配置文件生效且命令行参数优先"""
        data = prepare_windows(storage)
        path = tmp_path / "run.config"
        path.write_text("rank = 4\nepochs = 5\n")
        assert run(train_args(data) + ["--config", str(path)], storage) == EXIT_OK

        effective = RunConfig.from_file(str(tmp_path / "model.ckpt.config"))
        assert effective.rank == 4
        assert effective.epochs == 1
        adapter = next(iter(load_checkpoint("model.ckpt", storage).model.lora.values()))
        assert adapter.rank == 4

    def test_sweep(self, storage, tmp_path):
        """测试多配置对比表"""
        data = prepare_windows(storage)
        assert run(["sweep", "--data", data, "--out", "sweep.tsv"]
                   + SMALL_MODEL + SMALL_TRAIN, storage) == EXIT_OK

        lines = read(tmp_path, "sweep.tsv").splitlines()
        assert len(lines) == 5
        rows = [line.split("\t") for line in lines[1:]]
        assert [row[0] for row in rows] == ["k_proj", "k_proj+v_proj",
                                            "q_proj+k_proj+v_proj", "adapter"]
        lora_trainable = [int(row[1]) for row in rows[:3]]
        assert lora_trainable[0] < lora_trainable[1] < lora_trainable[2]


@pytest.mark.skipif(os.getenv("LOGPEFT_RUN_SLOW", "").lower() != "true",
                    reason="设置 LOGPEFT_RUN_SLOW=true 运行完整规模流程")
class TestDeskScale:
    """完整规模流程（默认跳过）"""

    def test_lora_f1(self, storage, tmp_path):
        """测试默认超参数下 LoRA 的测试集 F1 ≥ 0.90"""
        assert run(["synth", "--out", "raw.log"], storage) == EXIT_OK
        assert run(["parse", "--logs", "raw.log", "--templates-out", "templates.tsv",
                    "--keys-out", "keys.txt", "--labels-out", "labels.txt"], storage) == EXIT_OK
        assert run(["windows", "--keys", "keys.txt", "--labels", "labels.txt",
                    "--templates", "templates.tsv", "--out", "windows.txt"], storage) == EXIT_OK
        assert run(["train", "--data", "windows.txt", "--checkpoint-out", "model.ckpt",
                    "--report-out", "history.tsv"], storage) == EXIT_OK
        assert run(["eval", "--checkpoint", "model.ckpt", "--data", "windows.txt",
                    "--report-out", "metrics.txt"], storage) == EXIT_OK

        assert float(storage.read_metrics("metrics.txt")["f1"]) >= 0.90
