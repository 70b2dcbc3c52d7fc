"""Tests for the cumulative loss ablation."""

import csv

import pytest

from src.ablation import ABLATION_COLUMNS, AblationRow, ablate, ablation_configs, write_ablation_table
from tests.conftest import tiny_model_config, tiny_train_config


class TestConfigs:
    def test_rows_are_cumulative(self):
        flags = [cfg.flags for cfg in ablation_configs(tiny_train_config())]
        assert flags == [
            {"c1": True, "c2": False, "i1": False, "i2": False},
            {"c1": True, "c2": True, "i1": False, "i2": False},
            {"c1": True, "c2": True, "i1": True, "i2": False},
            {"c1": True, "c2": True, "i1": True, "i2": True},
        ]

    def test_other_settings_are_kept(self):
        base = tiny_train_config(learning_rate=0.02, epochs=3)
        assert all(cfg.learning_rate == 0.02 and cfg.epochs == 3 for cfg in ablation_configs(base))


class TestAblate:
    @pytest.fixture(scope="class")
    def ablation(self, tiny_dataset, tmp_path_factory):
        out = tmp_path_factory.mktemp("ablation") / "ablation.csv"
        return ablate(tiny_dataset, tiny_train_config(), tiny_model_config(), out_path=out), out

    def test_four_rows(self, ablation):
        rows, _ = ablation
        assert len(rows) == 4
        for row in rows:
            assert 0.0 <= row.acc_50 <= row.acc_25 <= 1.0
            assert 0.0 <= row.acc <= 1.0

    def test_disabled_losses_are_not_computed(self, ablation):
        rows, _ = ablation
        assert rows[0].loss_counters["pn"] == 0
        assert rows[0].loss_counters["phr"] == 0
        assert rows[2].loss_counters["rel"] == 0
        assert all(rows[3].loss_counters[name] > 0 for name in ("se", "pn", "phr"))

    def test_table_is_written(self, ablation):
        _, out = ablation
        with open(out, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == ABLATION_COLUMNS
        assert [row[:4] for row in rows[1:]] == [["1", "0", "0", "0"], ["1", "1", "0", "0"],
                                                  ["1", "1", "1", "0"], ["1", "1", "1", "1"]]


class TestTable:
    def test_formatting(self, tmp_path):
        row = AblationRow({"c1": True, "c2": True, "i1": False, "i2": False}, 0.5, 0.25, 0.125, {})
        path = tmp_path / "nested" / "table.csv"
        write_ablation_table([row], path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == [",".join(ABLATION_COLUMNS), "1,1,0,0,0.5000,0.2500,0.1250"]
