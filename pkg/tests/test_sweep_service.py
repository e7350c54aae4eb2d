import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from src.models.experiment_config import Condition, ExperimentConfig, Task
from src.repositories.local_run_repository import LocalRunRepository
from src.services.detection_service import load_fixture_table
from src.services.sweep_service import SweepService, fit_table, run_cell, write_sweep
from src.utils.error_handler import ConfigValidationError


def fake_row(flat_config, seed):
    """学習せずにラン表の1行を作る"""
    config = ExperimentConfig.from_flat(flat_config)
    grok = int(round(0.2 / config.lr)) * 10
    return {"run_id": config.run_id(seed), "lr": config.lr, "seed": seed,
            "grok_step": grok + seed, "onset_step": grok // 4, "lead": None,
            "lead_fraction": None, "status": "completed", "flags": ""}


class TestSweepService(unittest.TestCase):
    """スイープサービスのテスト"""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.service = SweepService(LocalRunRepository(self.temp_dir.name))
        self.config = ExperimentConfig(task=Task.DYCK, max_steps=100)

    def tearDown(self):
        self.temp_dir.cleanup()

    @patch("src.services.sweep_service.run_cell", side_effect=fake_row)
    def test_sweep_writes_tables(self, run_cell_mock):
        """全セルを実行してラン表とフィットを保存"""
        result = self.service.sweep(self.config, lr_grid=[1e-3, 3e-3, 1e-2], seeds=[1, 2],
                                    workers=1)
        self.assertEqual(run_cell_mock.call_count, 6)
        self.assertEqual(len(result.table), 6)
        self.assertTrue(result.fit.fitted)
        self.assertEqual(result.fit.n_points, 6)
        self.assertEqual(result.lr_fit.n_points, 3)

        root = Path(self.temp_dir.name)
        for name in ("sweep_dyck_runs.csv", "sweep_dyck_lr_means.csv", "sweep_dyck_fit.json"):
            self.assertTrue((root / name).exists(), name)
        with open(root / "sweep_dyck_fit.json", encoding="utf-8") as f:
            saved = json.load(f)
        self.assertAlmostEqual(saved["per_run"]["alpha"], result.fit.alpha)

    @patch("src.services.sweep_service.run_cell", side_effect=fake_row)
    def test_single_learning_rate_is_insufficient(self, _):
        """2点しかなければフィットしない"""
        result = self.service.sweep(self.config, lr_grid=[1e-3], seeds=[1, 2], workers=1)
        self.assertFalse(result.fit.fitted)
        self.assertIn("insufficient_points", result.fit.flags)

    @patch("src.services.sweep_service.run_cell", return_value=None)
    def test_failed_cells_are_marked(self, _):
        """失敗したセルは status=failed の行になる"""
        result = self.service.sweep(self.config, lr_grid=[1e-3], seeds=[5], workers=1)
        row = result.table.iloc[0]
        self.assertEqual(row["status"], "failed")
        self.assertIn("run_failed", row["flags"])
        self.assertEqual(row["run_id"], "dyck_lr1e-03_s5")

    def test_empty_grid(self):
        """空のグリッドは拒否"""
        with self.assertRaises(ConfigValidationError):
            self.service.sweep(self.config, lr_grid=[], seeds=[1])

    @patch("src.services.sweep_service.run_cell", side_effect=fake_row)
    def test_dose_response_uses_baseline_run(self, run_cell_mock):
        """介入セルはシードごとのベースラインを参照する"""
        df = self.service.dose_response(self.config, grid=[(Condition.PROJECT_1B, 1.0)],
                                        seeds=[3], workers=1)
        self.assertEqual(list(df["condition"]), ["baseline", "project_1b"])
        flat = run_cell_mock.call_args_list[1][0][0]
        self.assertEqual(flat["basis_run"], "dyck_lr1e-03_s3")
        self.assertEqual(flat["condition"], "project_1b")
        root = Path(self.temp_dir.name)
        self.assertTrue((root / "dose_response_dyck.csv").exists())
        self.assertTrue((root / "dose_summary_dyck.csv").exists())

    def test_default_grid(self):
        """既定グリッドは4条件の用量を並べる"""
        grid = SweepService.default_grid([Condition.PENALTY_1B])
        self.assertEqual([s for _, s in grid], [0.0, 0.25, 0.5, 0.75, 1.0])


class TestFitTable(unittest.TestCase):
    """ラン表からのフィットのテスト"""

    def test_fixture_fit_and_write(self):
        """同梱表のフィットを書き出せる"""
        result = fit_table(load_fixture_table("scan"))
        self.assertEqual(result.fit.n_points, 11)
        self.assertEqual(result.lr_fit.domain, "lr_means")
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_sweep(result, Path(temp_dir), "fixture_scan")
            self.assertTrue(path.exists())

    def test_run_cell_isolates_errors(self):
        """学習できない設定は例外ではなく None"""
        with tempfile.TemporaryDirectory() as temp_dir:
            flat = ExperimentConfig(seq_len=4, max_depth=2, n_train=50, n_test=50,
                                    output_dir=temp_dir).to_flat()
            self.assertIsNone(run_cell(flat, 1))


if __name__ == '__main__':
    unittest.main()
