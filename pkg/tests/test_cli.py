"""命令行参数解析与退出码单元测试。"""

import pytest
import os

import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cli import run
from cli.commands import EXIT_DATA
from cli.parser import build_parser, parse_arguments
from config import Config, RunConfig
from core.errors import ArgumentError
from data.storage import Storage


class TestParseArguments:
    """参数解析测试类"""

    def test_only_given_flags_are_overrides(self):
        """测试未给出的参数不进入覆盖项"""
        command, control, overrides = parse_arguments(["train", "--rank", "4", "--lr", "0.01"])
        assert command == "train"
        assert overrides == {"rank": 4, "lr": 0.01}
        assert control == {"command": "train", "config": None, "verbose": False}

    def test_flag_names_map_to_config_fields(self):
        """测试参数名映射到配置字段"""
        _, _, overrides = parse_arguments(["windows", "--size", "32", "--stride", "8"])
        assert overrides == {"window_size": 32, "stride": 8}
        _, _, overrides = parse_arguments(["train", "--dropout", "0.1", "--batch", "4",
                                           "--scale-by-rank"])
        assert overrides == {"lora_dropout": 0.1, "batch_size": 4, "scale_by_rank": True}
        _, _, overrides = parse_arguments(["eval", "--split", "all"])
        assert overrides == {"eval_split": "all"}

    def test_every_option_is_a_config_field(self):
        """测试每个子命令的配置参数都对应 RunConfig 字段"""
        fields = set(RunConfig.field_names())
        parser = build_parser()
        subparsers = next(a for a in parser._actions if a.dest == "command")
        for name, sub in subparsers.choices.items():
            for action in sub._actions:
                if action.dest in ("help", "config", "verbose"):
                    continue
                assert action.dest in fields, f"{name}: {action.dest}"

    def test_control_options(self):
        """测试控制参数"""
        _, control, overrides = parse_arguments(["synth", "--config", "run.config", "-v"])
        assert control["config"] == "run.config"
        assert control["verbose"] is True
        assert overrides == {}

    def test_errors_raise(self):
        """测试解析错误抛出异常而不是退出"""
        with pytest.raises(ArgumentError):
            parse_arguments(["train", "--epochs", "three"])
        with pytest.raises(ArgumentError):
            parse_arguments(["bogus"])

    def test_missing_command(self):
        """测试缺少子命令"""
        with pytest.raises(ArgumentError):
            parse_arguments(["--verbose"])


class TestMalformedInput:
    """损坏输入的退出码测试类"""

    @pytest.fixture
    def storage(self, tmp_path, monkeypatch):
        monkeypatch.delenv(Config.CONFIG_ENV, raising=False)
        return Storage(str(tmp_path))

    def test_bad_template_header(self, storage, tmp_path, capsys):
        """测试窗口文件模板数非整数时返回 2"""
        (tmp_path / "w.txt").write_text("# templates=abc\n0\t1 2 3\n1\t2 2 2\n")
        code = run(["train", "--data", "w.txt", "--checkpoint-out", "m.ckpt",
                    "--epochs", "1", "--report-out", "r.tsv"], storage)
        assert code == EXIT_DATA
        assert "w.txt:1" in capsys.readouterr().err
        assert not (tmp_path / "m.ckpt").exists()

    def test_bad_template_file(self, storage, tmp_path):
        """测试模板文件计数非整数时返回 2"""
        (tmp_path / "keys.txt").write_text("0\n0\n")
        (tmp_path / "labels.txt").write_text("0\n0\n")
        (tmp_path / "t.tsv").write_text("0\tlots\ta b\n")
        assert run(["windows", "--keys", "keys.txt", "--labels", "labels.txt",
                    "--templates", "t.tsv", "--out", "w.txt"], storage) == EXIT_DATA

    def test_keys_not_utf8(self, storage, tmp_path):
        """测试日志键文件不是 UTF-8 时返回 2"""
        (tmp_path / "keys.txt").write_bytes(b"0\n\xff\xfe\n")
        (tmp_path / "labels.txt").write_text("0\n0\n")
        (tmp_path / "t.tsv").write_text("0\t2\ta b\n")
        assert run(["windows", "--keys", "keys.txt", "--labels", "labels.txt",
                    "--templates", "t.tsv", "--out", "w.txt"], storage) == EXIT_DATA

    def test_windows_not_utf8(self, storage, tmp_path):
        """测试窗口文件不是 UTF-8 时返回 2"""
        (tmp_path / "w.txt").write_bytes(b"# templates=3\n0\t1 2\n\xc3\x28\n")
        assert run(["train", "--data", "w.txt", "--checkpoint-out", "m.ckpt",
                    "--report-out", "r.tsv"], storage) == EXIT_DATA
