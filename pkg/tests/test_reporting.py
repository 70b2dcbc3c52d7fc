"""Tests for artifact digests."""

import pytest

from src.ablation import AblationRow, write_ablation_table
from src.evaluator import evaluate, write_report
from src.exceptions import DatasetError
from src.file_manager import DatasetFileManager
from src.reporting import digest
from src.trainer import write_training_log


class TestDigest:
    def test_training_log(self, tmp_path):
        path = tmp_path / "train.log.csv"
        write_training_log(path, [
            {"epoch": 1, "L_se": 0.5, "L_PN": 1.5, "L_phr": None, "L_rel": 0.2, "total": 2.0},
            {"epoch": 2, "L_se": 0.25, "L_PN": 1.0, "L_phr": None, "L_rel": 0.1, "total": 1.25},
        ])
        lines = digest(path)
        assert lines[0] == "training log: 2 epochs"
        assert "best=1.250000 (epoch 2)" in lines[1]
        assert "L_phr=off" in lines[2]

    def test_evaluation_outputs(self, oracle_dataset, oracle_checkpoint, tmp_path):
        report = evaluate(oracle_dataset, oracle_checkpoint, mode="gt")
        json_path, csv_path = write_report(report, tmp_path / "report.json")
        summary = digest(json_path)
        assert summary[0] == "evaluation: mode=gt queries=12"
        assert summary[1] == "Acc=1.0000"
        records = digest(csv_path)
        assert records[0] == "evaluation records: 12 queries over 6 scenes"
        assert "mean IoU=1.0000" in records[1]
        assert records[2] == "branches instance=12"

    def test_ablation_table(self, tmp_path):
        path = tmp_path / "ablation.csv"
        write_ablation_table([AblationRow({"c1": True, "c2": False, "i1": False, "i2": False}, 0.5, 0.25, 0.75, {})],
                             path)
        assert digest(path) == ["ablation: 1 configurations", "{c1}: Acc@.25=0.5000 Acc@.50=0.2500 Acc=0.7500"]

    def test_dataset_and_metadata(self, tiny_dataset):
        manager = DatasetFileManager()
        train = sum(len(s.queries) for s in manager.read_scenes(tiny_dataset, split="train")[0])
        test = sum(len(s.queries) for s in manager.read_scenes(tiny_dataset, split="test")[0])
        lines = digest(tiny_dataset)
        assert lines[0] == f"dataset: 10 scenes, {train + test} queries"
        assert f"test: 4 scenes, {test} queries" in lines
        assert f"train: 6 scenes, {train} queries" in lines
        meta = digest(DatasetFileManager.meta_path(tiny_dataset))
        assert meta[0] == "dataset metadata: format v1 seed=0"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="no such file"):
            digest(tmp_path / "absent.csv")

    def test_unknown_csv(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="unrecognised CSV header"):
            digest(path)

    def test_unrecognised_text(self, tmp_path):
        path = tmp_path / "notes.txt"
        path.write_text("hello\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="not a recognised artifact"):
            digest(path)
