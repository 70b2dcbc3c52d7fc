"""Tests for the command-line entry point."""

import logging

import pytest

from src.file_manager import DatasetFileManager
from src.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from utils.logging_config import get_logger, setup_logging


def _small_gen(out) -> list:
    return ["gen", "--out", str(out), "--set", "gen.train_scenes=3", "--set", "gen.test_scenes=2"]


class TestUsage:
    @pytest.mark.parametrize("argv", [
        [],
        ["fly"],
        ["gen"],
        ["gen", "--bogus"],
        ["train", "--data", "d.jsonl"],
        ["eval", "--ckpt", "m.ckpt"],
        ["infer", "--ckpt", "m.ckpt", "--query", "the chair"],
        ["parse"],
        ["report"],
        ["gen", "--out", "x.jsonl", "--set", "model.width=3"],
        ["gen", "--out", "x.jsonl", "--set", "model.heads=5"],
        ["eval", "--data", "d.jsonl", "--ckpt", "m.ckpt", "--mode", "oracle"],
    ])
    def test_usage_errors(self, argv):
        assert run(argv) == EXIT_USAGE

    def test_help(self, capsys):
        assert run(["--help"]) == EXIT_OK
        assert "weakground" in capsys.readouterr().out


class TestCommands:
    def test_parse_query(self, capsys):
        assert run(["parse", "--query", "the chair that is to the left of the bed"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert "target=chair" in lines
        assert "phrases=chair, bed" in lines
        assert "triple=(left, chair, bed)" in lines

    def test_parse_failure_is_a_runtime_error(self):
        assert run(["parse", "--query", "the thing over there"]) == EXIT_RUNTIME

    def test_parse_dataset(self, tiny_dataset, capsys):
        assert run(["parse", "--data", str(tiny_dataset)]) == EXIT_OK
        first = capsys.readouterr().out.splitlines()[0]
        assert "target_accuracy=1.0000" in first
        assert "parse_failures=0" in first

    def test_gen_is_deterministic(self, tmp_path, capsys):
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run(_small_gen(first)) == EXIT_OK
        assert run(_small_gen(second)) == EXIT_OK
        assert first.read_bytes() == second.read_bytes()
        assert "train: scenes=3" in capsys.readouterr().out

    def test_eval_ground_truth_mode(self, oracle_dataset, oracle_checkpoint, tmp_path, capsys):
        report = tmp_path / "report.json"
        argv = ["eval", "--data", str(oracle_dataset), "--ckpt", str(oracle_checkpoint), "--mode", "gt",
                "--report", str(report)]
        assert run(argv) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert "Acc=1.0000" in lines
        assert report.exists()
        assert report.with_suffix(".csv").exists()

    def test_eval_missing_checkpoint(self, oracle_dataset, tmp_path):
        argv = ["eval", "--data", str(oracle_dataset), "--ckpt", str(tmp_path / "absent.ckpt")]
        assert run(argv) == EXIT_RUNTIME

    def test_infer(self, oracle_dataset, oracle_checkpoint, capsys):
        scene = DatasetFileManager().read_scenes(oracle_dataset, split="test")[0][0]
        argv = ["infer", "--ckpt", str(oracle_checkpoint), "--data", str(oracle_dataset),
                "--scene-id", scene.scene_id, "--query", scene.queries[0].text]
        assert run(argv) == EXIT_OK
        line = capsys.readouterr().out.strip()
        assert line.startswith("proposal=")
        assert "branch=instance" in line

    def test_infer_unknown_scene(self, oracle_dataset, oracle_checkpoint):
        argv = ["infer", "--ckpt", str(oracle_checkpoint), "--data", str(oracle_dataset),
                "--scene-id", "nowhere", "--query", "the chair"]
        assert run(argv) == EXIT_RUNTIME

    def test_train_then_report(self, tiny_dataset, tmp_path, capsys):
        checkpoint = tmp_path / "model.ckpt"
        argv = ["train", "--data", str(tiny_dataset), "--out", str(checkpoint),
                "--set", "train.epochs=1", "--set", "model.embed_dim=16", "--set", "model.heads=2",
                "--set", "model.text_layers=1", "--set", "model.fusion_layers=1"]
        assert run(argv) == EXIT_OK
        assert checkpoint.exists()
        capsys.readouterr()
        assert run(["report", "--in", str(checkpoint) + ".log.csv"]) == EXIT_OK
        assert capsys.readouterr().out.startswith("training log: 1 epochs")

    def test_report_missing_artifact(self, tmp_path):
        assert run(["report", "--in", str(tmp_path / "absent.csv")]) == EXIT_RUNTIME


class TestLogging:
    def test_setup_logging_without_file(self):
        logger = setup_logging(None, level=logging.WARNING)
        assert logger is get_logger()
        assert logger.name == "weakground"
        assert logging.getLogger().level == logging.WARNING
        setup_logging(None)
